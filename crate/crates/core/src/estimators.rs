//! Bounded-sensitivity estimators of the weighted average user update.
//!
//! Users are sampled independently with probability `q`, so the realized
//! sample weight varies from round to round. The fixed-denominator
//! estimator divides by the expected weight `qW`; the clipped-denominator
//! estimator divides by the realized weight but never by less than
//! `qW_min`. Both bound how far one user can move the output, which is what
//! the Gaussian noise is calibrated against.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramvec::{ParamVector, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// `sum w_k delta_k / (qW)`; unbiased, sensitivity `S / (qW)`.
    FixedDenominator,
    /// `sum w_k delta_k / max(qW_min, sum w_k)`; sensitivity `2S / (qW_min)`.
    ClippedDenominator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// User sampling probability.
    pub q: f64,
    /// Total weight `W` of the population.
    pub total_weight: f64,
    /// `W_min`; only read by the clipped-denominator estimator.
    pub min_weight: f64,
}

impl EstimatorConfig {
    pub fn fixed(q: f64, total_weight: f64) -> Self {
        EstimatorConfig {
            kind: EstimatorKind::FixedDenominator,
            q,
            total_weight,
            min_weight: total_weight,
        }
    }

    pub fn clipped(q: f64, total_weight: f64, min_weight: f64) -> Self {
        EstimatorConfig {
            kind: EstimatorKind::ClippedDenominator,
            q,
            total_weight,
            min_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::config(format!("sampling probability q must lie in (0, 1], got {}", self.q)));
        }
        if !(self.total_weight > 0.0) || !self.total_weight.is_finite() {
            return Err(Error::config(format!("total weight must be positive, got {}", self.total_weight)));
        }
        if self.kind == EstimatorKind::ClippedDenominator
            && !(self.min_weight > 0.0 && self.min_weight <= self.total_weight)
        {
            return Err(Error::config(format!(
                "W_min must lie in (0, W={}], got {}",
                self.total_weight, self.min_weight
            )));
        }
        Ok(())
    }

    /// Expected sample weight `qW` (the expected number of users when all `w_k = 1`).
    pub fn expected_weight(&self) -> f64 {
        self.q * self.total_weight
    }

    fn denominator(&self, sample_weight: f64) -> f64 {
        match self.kind {
            EstimatorKind::FixedDenominator => self.q * self.total_weight,
            EstimatorKind::ClippedDenominator => (self.q * self.min_weight).max(sample_weight),
        }
    }
}

/// One sampled user's clipped update and its weight `w_k` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate {
    pub user_id: u64,
    pub weight: f64,
    pub delta: ParamVector,
}

/// Applies the configured estimator. Updates are summed in ascending
/// `user_id` order so the result does not depend on arrival order. An
/// empty sample yields the zero vector.
pub fn estimate(sample: &[WeightedUpdate], cfg: &EstimatorConfig, shape: &Shape) -> Result<ParamVector> {
    cfg.validate()?;
    let mut order: Vec<&WeightedUpdate> = sample.iter().collect();
    order.sort_by_key(|u| u.user_id);

    let mut sum = ParamVector::zeros(shape);
    let mut sample_weight = 0.0;
    for update in order {
        if !(0.0..=1.0).contains(&update.weight) {
            return Err(Error::config(format!(
                "user {} has weight {} outside [0, 1]",
                update.user_id, update.weight
            )));
        }
        if !sum.is_compatible(&update.delta) {
            return Err(Error::shape(format!("update from user {} does not match the model shape", update.user_id)));
        }
        sum.add_scaled_assign(&update.delta, update.weight)?;
        sample_weight += update.weight;
    }
    sum.scale_assign(1.0 / cfg.denominator(sample_weight));
    Ok(sum)
}

/// Upper bound on `||f(C + {k}) - f(C)||` when every `||w_k delta_k|| <= clip_bound`.
pub fn sensitivity_bound(cfg: &EstimatorConfig, clip_bound: f64) -> f64 {
    match cfg.kind {
        EstimatorKind::FixedDenominator => clip_bound / (cfg.q * cfg.total_weight),
        EstimatorKind::ClippedDenominator => 2.0 * clip_bound / (cfg.q * cfg.min_weight),
    }
}

/// Noise standard deviation `z * sensitivity`.
pub fn calibrate_sigma(cfg: &EstimatorConfig, clip_bound: f64, z: f64) -> f64 {
    z * sensitivity_bound(cfg, clip_bound)
}

/// Knobs for the adversarial sensitivity probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub trials: usize,
    /// Background users contribute zero vectors, isolating the denominator shift.
    pub zero_background: bool,
    /// Cap on background sample size per trial.
    pub max_background: usize,
}

impl ProbeOptions {
    pub fn new(trials: usize) -> Self {
        ProbeOptions {
            trials,
            zero_background: false,
            max_background: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityReport {
    pub max_observed: f64,
    pub bound: f64,
    pub trials: usize,
}

const PROBE_LAYERS: [usize; 2] = [2, 3];

fn probe_shape() -> Shape {
    Shape::new([("a", PROBE_LAYERS[0]), ("b", PROBE_LAYERS[1])])
}

fn vector_from(flat: &[f64]) -> ParamVector {
    ParamVector::from_pairs([("a", flat[..2].to_vec()), ("b", flat[2..].to_vec())]).expect("probe shape")
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn axis_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; dim];
    v[rng.random_range(0..dim)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    v
}

/// Searches for the largest change one added user can cause.
///
/// Every user satisfies `||delta_k|| <= clip_bound` and `w_k <= 1`, the
/// regime clipping produces. Each trial draws a background sample whose
/// weight straddles the estimator's denominator floor, optionally all
/// aligned along one direction, then adds a user with
/// `||delta_k|| = clip_bound` (so `||w_k delta_k|| = clip_bound` whenever
/// `w_k = 1`) pointing along a random sphere direction, a random axis, or
/// against the background.
pub fn empirical_sensitivity_with<R: Rng + ?Sized>(
    cfg: &EstimatorConfig,
    clip_bound: f64,
    opts: &ProbeOptions,
    rng: &mut R,
) -> Result<SensitivityReport> {
    cfg.validate()?;
    if opts.trials == 0 {
        return Err(Error::config("sensitivity probe needs at least one trial"));
    }
    let dim: usize = PROBE_LAYERS.iter().sum();
    let shape = probe_shape();
    let floor = match cfg.kind {
        EstimatorKind::FixedDenominator => cfg.expected_weight(),
        EstimatorKind::ClippedDenominator => cfg.q * cfg.min_weight,
    };
    let mut max_observed: f64 = 0.0;

    for _ in 0..opts.trials {
        let target_weight = rng.random_range(0.0..3.0 * floor);
        let aligned = rng.random_bool(0.5);
        let common = if rng.random_bool(0.5) {
            axis_direction(rng, dim)
        } else {
            random_direction(rng, dim)
        };

        let mut background = Vec::new();
        let mut weight_sum = 0.0;
        while weight_sum < target_weight && background.len() < opts.max_background {
            let w = if rng.random_bool(0.25) { 1.0 } else { rng.random_range(f64::MIN_POSITIVE..1.0) };
            let delta = if opts.zero_background {
                alloc::vec![0.0; dim]
            } else {
                let dir = if aligned { common.clone() } else { random_direction(rng, dim) };
                let radius = if rng.random_bool(0.5) { clip_bound } else { rng.random_range(0.0..clip_bound) };
                dir.into_iter().map(|x| x * radius).collect()
            };
            background.push(WeightedUpdate {
                user_id: background.len() as u64,
                weight: w,
                delta: vector_from(&delta),
            });
            weight_sum += w;
        }

        let w = if rng.random_bool(0.25) { 1.0 } else { rng.random_range(1e-3..1.0) };
        let dir = match rng.random_range(0..3) {
            0 => common.iter().map(|x| -x).collect(),
            1 => axis_direction(rng, dim),
            _ => random_direction(rng, dim),
        };
        let added = WeightedUpdate {
            user_id: background.len() as u64,
            weight: w,
            delta: vector_from(&dir.into_iter().map(|x| x * clip_bound).collect::<Vec<_>>()),
        };

        let without = estimate(&background, cfg, &shape)?;
        background.push(added);
        let with = estimate(&background, cfg, &shape)?;
        max_observed = max_observed.max(with.sub(&without)?.flat_norm());
    }

    Ok(SensitivityReport {
        max_observed,
        bound: sensitivity_bound(cfg, clip_bound),
        trials: opts.trials,
    })
}

pub fn empirical_sensitivity<R: Rng + ?Sized>(
    cfg: &EstimatorConfig,
    clip_bound: f64,
    trials: usize,
    rng: &mut R,
) -> Result<SensitivityReport> {
    empirical_sensitivity_with(cfg, clip_bound, &ProbeOptions::new(trials), rng)
}
