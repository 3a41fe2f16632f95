//! The DP-FedAvg / DP-FedSGD round loop.
//!
//! Each round samples users independently with probability `q`, computes
//! each sampled user's clipped update against the current parameters,
//! combines them with a bounded-sensitivity estimator, adds Gaussian noise
//! calibrated to that sensitivity, applies the result, and charges the
//! moments accountant one round at noise scale `z`.
//!
//! Every random draw comes from a substream keyed by `(seed, round,
//! purpose, user)`, and updates are summed in user-id order, so a run is
//! bit-reproducible for any [`Executor`] and can resume from any round.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::accountant::MomentsAccountant;
use crate::error::{Error, Result};
use crate::estimators::{calibrate_sigma, estimate, EstimatorConfig, EstimatorKind, WeightedUpdate};
use crate::model::{evaluate, loss_and_grad, Metrics, Model, TokenDataset, UserShard};
use crate::paramvec::{add_gaussian_noise, ClipConfig, ParamVector};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    /// The user's whole local dataset in one batch.
    Full,
    /// A number of unrolled sequences.
    Sequences(usize),
}

impl BatchSize {
    fn resolve(self, available: usize) -> usize {
        match self {
            BatchSize::Full => available,
            BatchSize::Sequences(n) => n.min(available),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg {
        epochs: usize,
        batch_size: BatchSize,
        learning_rate: f64,
    },
    FedSgd {
        batch_size: BatchSize,
        learning_rate: f64,
    },
}

impl Algorithm {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            Algorithm::FedAvg { learning_rate, .. } | Algorithm::FedSgd { learning_rate, .. } => learning_rate,
        }
    }
}

/// When FedAvg projects the local deviation `theta - theta0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSchedule {
    /// After every local batch step.
    #[default]
    Greedy,
    /// Once, on the final update.
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// User sampling probability.
    pub q: f64,
    /// Noise scale: sigma divided by the estimator's sensitivity.
    pub z: f64,
    pub estimator: EstimatorKind,
    /// `W_min = min_weight_fraction * W` for the clipped-denominator estimator.
    pub min_weight_fraction: f64,
    pub clip: ClipConfig,
    pub clip_schedule: ClipSchedule,
    pub algorithm: Algorithm,
    pub rounds: u64,
    pub seed: u64,
    pub noise_enabled: bool,
    /// Exactly this many users per round, drawn uniformly (no privacy accounting).
    pub fixed_sample_size: Option<usize>,
    pub eval_every: u64,
    /// Delta for the per-round epsilon; `None` means `K^-1.1`.
    pub target_delta: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            q: 0.05,
            z: 1.0,
            estimator: EstimatorKind::FixedDenominator,
            min_weight_fraction: 0.9,
            clip: ClipConfig::flat(15.0),
            clip_schedule: ClipSchedule::Greedy,
            algorithm: Algorithm::FedAvg {
                epochs: 1,
                batch_size: BatchSize::Sequences(8),
                learning_rate: 6.0,
            },
            rounds: 500,
            seed: 0,
            noise_enabled: true,
            fixed_sample_size: None,
            eval_every: 20,
            target_delta: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, num_layers: usize, num_users: usize) -> Result<()> {
        if num_users == 0 {
            return Err(Error::config("dataset has no users"));
        }
        match self.fixed_sample_size {
            Some(c) if c == 0 || c > num_users => {
                return Err(Error::config(format!("fixed sample size {c} must lie in 1..={num_users}")));
            }
            Some(_) if self.noise_enabled => {
                return Err(Error::config(
                    "fixed-size sampling has no privacy accounting; disable noise or use Poisson sampling",
                ));
            }
            _ => {}
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::config(format!("q must lie in (0, 1], got {}", self.q)));
        }
        if self.noise_enabled && !(self.z > 0.0 && self.z.is_finite()) {
            return Err(Error::config(format!("noise scale z must be positive, got {}", self.z)));
        }
        if !(self.min_weight_fraction > 0.0 && self.min_weight_fraction <= 1.0) {
            return Err(Error::config("min_weight_fraction must lie in (0, 1]"));
        }
        self.clip.validate(num_layers)?;
        if self.noise_enabled && self.clip.is_disabled() {
            return Err(Error::config("noise calibration needs a finite clipping bound"));
        }
        let (lr, batch) = match self.algorithm {
            Algorithm::FedAvg {
                epochs,
                batch_size,
                learning_rate,
            } => {
                if epochs == 0 {
                    return Err(Error::config("FedAvg needs at least one local epoch"));
                }
                (learning_rate, batch_size)
            }
            Algorithm::FedSgd {
                batch_size,
                learning_rate,
            } => (learning_rate, batch_size),
        };
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if batch == BatchSize::Sequences(0) {
            return Err(Error::config("batch size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if let Some(d) = self.target_delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config(format!("delta must lie in (0, 1), got {d}")));
            }
        }
        Ok(())
    }

    /// Sampling probability seen by the estimator.
    pub fn effective_q(&self, num_users: usize) -> f64 {
        match self.fixed_sample_size {
            Some(c) => c as f64 / num_users as f64,
            None => self.q,
        }
    }

    pub fn estimator_config(&self, data: &TokenDataset) -> EstimatorConfig {
        let w = data.total_weight();
        let q = self.effective_q(data.len());
        match self.estimator {
            EstimatorKind::FixedDenominator => EstimatorConfig::fixed(q, w),
            EstimatorKind::ClippedDenominator => EstimatorConfig::clipped(q, w, self.min_weight_fraction * w),
        }
    }

    pub fn delta_for(&self, num_users: usize) -> f64 {
        self.target_delta
            .unwrap_or_else(|| crate::accountant::table_delta(num_users as u64))
    }
}

/// Indices of users included independently with probability `q`, ascending.
///
/// Draws geometric gaps between included users, so the cost is linear in
/// the sample size rather than the population.
pub fn sample_users<R: Rng + ?Sized>(num_users: usize, q: f64, rng: &mut R) -> Vec<usize> {
    if q >= 1.0 {
        return (0..num_users).collect();
    }
    let Ok(gaps) = Geometric::new(q) else {
        return Vec::new();
    };
    let mut picked = Vec::new();
    let mut next = 0u64;
    loop {
        next = next.saturating_add(gaps.sample(rng));
        if next >= num_users as u64 {
            return picked;
        }
        picked.push(next as usize);
        next += 1;
    }
}

/// Exactly `count` distinct users, uniformly, ascending.
pub fn sample_fixed<R: Rng + ?Sized>(num_users: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut picked = index::sample(rng, num_users, count).into_vec();
    picked.sort_unstable();
    picked
}

/// A user's clipped update plus what clipping did to it.
#[derive(Debug, Clone, PartialEq)]
pub struct UserUpdate {
    pub user_id: u64,
    pub weight: f64,
    pub delta: ParamVector,
    /// Norm of the update just before its last projection.
    pub pre_clip_norm: f64,
    /// Whether any projection changed the update.
    pub clipped: bool,
}

fn user_error(user_id: u64, batch: usize) -> impl Fn(Error) -> Error {
    move |e| Error::UserUpdate {
        user_id,
        batch,
        source: alloc::boxed::Box::new(e),
    }
}

fn batch_gradient<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[&[u32]],
    user_id: u64,
    batch_index: usize,
) -> Result<ParamVector> {
    let err = user_error(user_id, batch_index);
    let (loss, grad) = loss_and_grad(model, params, batch).map_err(&err)?;
    if !loss.is_finite() {
        return Err(err(Error::NonFinite(format!("loss ({loss})"))));
    }
    grad.check_finite("gradient").map_err(&err)?;
    Ok(grad)
}

fn local_sequences(shard: &UserShard, unroll: usize) -> Result<Vec<&[u32]>> {
    let seqs = shard.sequences(unroll);
    if seqs.is_empty() {
        return Err(Error::config(format!("user {} has no training sequences", shard.user_id)));
    }
    Ok(seqs)
}

/// Local SGD for `epochs` passes in batches of `batch_size` sequences,
/// starting from `theta0`. With [`ClipSchedule::Greedy`] the deviation
/// `theta - theta0` is projected after every step. The deviation itself is
/// what gets tracked and returned, so the result's norm bound is exact.
#[allow(clippy::too_many_arguments)]
pub fn user_update_fedavg<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shard: &UserShard,
    theta0: &ParamVector,
    unroll: usize,
    epochs: usize,
    batch_size: BatchSize,
    learning_rate: f64,
    clip: &ClipConfig,
    schedule: ClipSchedule,
    rng: &mut R,
) -> Result<UserUpdate> {
    let seqs = local_sequences(shard, unroll)?;
    let per_batch = batch_size.resolve(seqs.len());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut deviation = theta0.zeros_like();
    let mut theta = theta0.clone();
    let mut clipped = false;
    let mut pre_clip_norm = 0.0;
    let mut batch_index = 0;
    let mut batch: Vec<&[u32]> = Vec::with_capacity(per_batch);

    for _ in 0..epochs {
        if per_batch < seqs.len() {
            order.shuffle(rng);
        }
        for chunk in order.chunks(per_batch) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| seqs[i]));
            let grad = batch_gradient(model, &theta, &batch, shard.user_id, batch_index)?;
            deviation.add_scaled_assign(&grad, -learning_rate)?;
            if schedule == ClipSchedule::Greedy {
                pre_clip_norm = deviation.flat_norm();
                clipped |= clip
                    .apply_in_place(&mut deviation)
                    .map_err(user_error(shard.user_id, batch_index))?;
            }
            for (t, (t0, d)) in theta
                .values_mut()
                .zip(theta0.values().zip(deviation.values()))
            {
                *t = t0 + d;
            }
            batch_index += 1;
        }
    }
    if schedule == ClipSchedule::FinalOnly {
        pre_clip_norm = deviation.flat_norm();
        clipped = clip
            .apply_in_place(&mut deviation)
            .map_err(user_error(shard.user_id, batch_index))?;
    }
    Ok(UserUpdate {
        user_id: shard.user_id,
        weight: shard.weight,
        delta: deviation,
        pre_clip_norm,
        clipped,
    })
}

/// One clipped gradient step `clip(-eta * grad)` on a batch of
/// `batch_size` sequences drawn without replacement (all of them for
/// [`BatchSize::Full`]).
#[allow(clippy::too_many_arguments)]
pub fn user_update_fedsgd<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shard: &UserShard,
    theta0: &ParamVector,
    unroll: usize,
    batch_size: BatchSize,
    learning_rate: f64,
    clip: &ClipConfig,
    rng: &mut R,
) -> Result<UserUpdate> {
    let seqs = local_sequences(shard, unroll)?;
    let per_batch = batch_size.resolve(seqs.len());
    let batch: Vec<&[u32]> = if per_batch >= seqs.len() {
        seqs
    } else {
        let mut picks = index::sample(rng, seqs.len(), per_batch).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| seqs[i]).collect()
    };
    let mut delta = batch_gradient(model, theta0, &batch, shard.user_id, 0)?;
    delta.scale_assign(-learning_rate);
    let pre_clip_norm = delta.flat_norm();
    let clipped = clip.apply_in_place(&mut delta).map_err(user_error(shard.user_id, 0))?;
    Ok(UserUpdate {
        user_id: shard.user_id,
        weight: shard.weight,
        delta,
        pre_clip_norm,
        clipped,
    })
}

/// Dispatches on the configured algorithm.
pub fn user_update<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shard: &UserShard,
    theta0: &ParamVector,
    unroll: usize,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<UserUpdate> {
    match cfg.algorithm {
        Algorithm::FedAvg {
            epochs,
            batch_size,
            learning_rate,
        } => user_update_fedavg(
            model,
            shard,
            theta0,
            unroll,
            epochs,
            batch_size,
            learning_rate,
            &cfg.clip,
            cfg.clip_schedule,
            rng,
        ),
        Algorithm::FedSgd {
            batch_size,
            learning_rate,
        } => user_update_fedsgd(model, shard, theta0, unroll, batch_size, learning_rate, &cfg.clip, rng),
    }
}

/// Runs independent jobs `0..n`, returning results in index order.
pub trait Executor {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(job).collect()
    }
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub sampled_users: usize,
    pub sample_weight: f64,
    /// Pre-clip update norms across sampled users; `None` when nobody was sampled.
    pub norm_min: Option<f64>,
    pub norm_median: Option<f64>,
    pub norm_max: Option<f64>,
    pub frac_clipped: f64,
    /// Norm of the estimated average update before noise.
    pub update_norm: f64,
    pub sigma: f64,
    /// Cumulative epsilon at the run's delta; `None` without noise.
    pub epsilon: Option<f64>,
    pub eval: Option<Metrics>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Everything needed to continue a run from the end of `round`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub round: u64,
    pub params: ParamVector,
    pub accountant: Option<MomentsAccountant>,
}

pub struct Trainer<'a, M: Model + ?Sized> {
    cfg: TrainingConfig,
    model: &'a M,
    data: &'a TokenDataset,
    eval_set: &'a [&'a [u32]],
    estimator: EstimatorConfig,
    delta: f64,
    state: TrainerState,
}

impl<'a, M: Model + ?Sized> Trainer<'a, M> {
    pub fn new(cfg: TrainingConfig, model: &'a M, data: &'a TokenDataset, eval_set: &'a [&'a [u32]]) -> Result<Self> {
        cfg.validate(model.shape().num_layers(), data.len())?;
        let accountant = if cfg.noise_enabled {
            Some(MomentsAccountant::new(cfg.q)?)
        } else {
            None
        };
        let state = TrainerState {
            round: 0,
            params: model.init_params(cfg.seed),
            accountant,
        };
        Self::resume(cfg, model, data, eval_set, state)
    }

    pub fn resume(
        cfg: TrainingConfig,
        model: &'a M,
        data: &'a TokenDataset,
        eval_set: &'a [&'a [u32]],
        state: TrainerState,
    ) -> Result<Self> {
        cfg.validate(model.shape().num_layers(), data.len())?;
        if state.params.shape() != model.shape() {
            return Err(Error::shape("checkpoint parameters do not match the model"));
        }
        if cfg.noise_enabled != state.accountant.is_some() {
            return Err(Error::config("checkpoint accountant state does not match the noise setting"));
        }
        if data.vocab() != model.vocab_size() {
            return Err(Error::config(format!(
                "dataset vocabulary {} differs from model vocabulary {}",
                data.vocab(),
                model.vocab_size()
            )));
        }
        let estimator = cfg.estimator_config(data);
        estimator.validate()?;
        Ok(Trainer {
            delta: cfg.delta_for(data.len()),
            estimator,
            cfg,
            model,
            data,
            eval_set,
            state,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn params(&self) -> &ParamVector {
        &self.state.params
    }

    pub fn round(&self) -> u64 {
        self.state.round
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    /// Noise standard deviation applied each round (0 without noise).
    pub fn sigma(&self) -> f64 {
        if self.cfg.noise_enabled {
            calibrate_sigma(&self.estimator, self.cfg.clip.total_bound(), self.cfg.z)
        } else {
            0.0
        }
    }

    pub fn epsilon(&self) -> Result<Option<f64>> {
        self.state
            .accountant
            .as_ref()
            .map(|a| a.get_privacy_spent(self.delta))
            .transpose()
    }

    /// Runs one round.
    pub fn step<E: Executor + ?Sized>(&mut self, exec: &E) -> Result<RoundLog> {
        let round = self.state.round + 1;
        self.run_round(round, exec).map_err(|e| Error::Round {
            round,
            source: alloc::boxed::Box::new(e),
        })
    }

    fn run_round<E: Executor + ?Sized>(&mut self, round: u64, exec: &E) -> Result<RoundLog> {
        let seed = self.cfg.seed;
        let users = self.data.users();
        let mut sampling_rng = substream(seed, round, Purpose::Sampling, 0);
        let sampled = match self.cfg.fixed_sample_size {
            Some(c) => sample_fixed(users.len(), c, &mut sampling_rng),
            None => sample_users(users.len(), self.cfg.q, &mut sampling_rng),
        };

        let theta = &self.state.params;
        let unroll = self.data.unroll();
        let (model, cfg) = (self.model, &self.cfg);
        let results = exec.map(sampled.len(), |i| {
            let shard = &users[sampled[i]];
            let mut rng = substream(seed, round, Purpose::LocalTraining, shard.user_id);
            user_update(model, shard, theta, unroll, cfg, &mut rng)
        });
        let updates: Vec<UserUpdate> = results.into_iter().collect::<Result<_>>()?;

        let mut norms: Vec<f64> = updates.iter().map(|u| u.pre_clip_norm).collect();
        norms.sort_by(f64::total_cmp);
        let clipped = updates.iter().filter(|u| u.clipped).count();
        let weighted: Vec<WeightedUpdate> = updates
            .into_iter()
            .map(|u| WeightedUpdate {
                user_id: u.user_id,
                weight: u.weight,
                delta: u.delta,
            })
            .collect();
        let sample_weight = weighted.iter().map(|u| u.weight).sum();
        let average = estimate(&weighted, &self.estimator, &self.model.shape())?;
        let update_norm = average.flat_norm();

        let sigma = self.sigma();
        let mut noise_rng = substream(seed, round, Purpose::Noise, 0);
        let noised = add_gaussian_noise(&average, sigma, &mut noise_rng)?;
        self.state.params.add_assign(&noised)?;
        self.state.params.check_finite("model parameters")?;

        if let Some(acc) = self.state.accountant.as_mut() {
            acc.accum_priv_spending(self.cfg.z, 1)?;
        }
        self.state.round = round;

        let eval = if round.is_multiple_of(self.cfg.eval_every) || round == self.cfg.rounds {
            Some(evaluate(self.model, &self.state.params, self.eval_set)?)
        } else {
            None
        };

        Ok(RoundLog {
            round,
            sampled_users: sampled.len(),
            sample_weight,
            norm_min: norms.first().copied(),
            norm_median: (!norms.is_empty()).then(|| median(&norms)),
            norm_max: norms.last().copied(),
            frac_clipped: if norms.is_empty() {
                0.0
            } else {
                clipped as f64 / norms.len() as f64
            },
            update_norm,
            sigma,
            epsilon: self.epsilon()?,
            eval,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: ParamVector,
    pub logs: Vec<RoundLog>,
    pub epsilon: Option<f64>,
}

/// Runs all configured rounds from a fresh initialization.
pub fn run_training<M: Model + ?Sized, E: Executor + ?Sized>(
    cfg: TrainingConfig,
    model: &M,
    data: &TokenDataset,
    eval_set: &[&[u32]],
    exec: &E,
) -> Result<TrainingOutcome> {
    let mut trainer = Trainer::new(cfg, model, data, eval_set)?;
    let mut logs = Vec::new();
    while !trainer.is_finished() {
        logs.push(trainer.step(exec)?);
    }
    Ok(TrainingOutcome {
        epsilon: trainer.epsilon()?,
        params: trainer.state.params,
        logs,
    })
}
