//! Experiment configuration: the JSON file format, presets and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use dpfed_core::estimators::EstimatorKind;
use dpfed_core::fedtrain::{Algorithm, BatchSize, TrainingConfig};
use dpfed_core::model::{BuiltinModel, Model, SynthesisConfig, DEFAULT_UNROLL};
use dpfed_core::ClipConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::DEFAULT_EVAL_USERS;
use crate::error::{DpfedError, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated in memory; training users `0..users`, evaluation users after them.
    Synthetic {
        users: usize,
        tokens_per_user: usize,
        vocab: usize,
        heterogeneity: f64,
        seed: u64,
        eval_users: usize,
    },
    /// A directory written by `dpfed synthesize` (or anything with the same layout).
    Files { dir: PathBuf },
}

impl DatasetSource {
    pub fn synthetic(cfg: &SynthesisConfig, eval_users: usize) -> Self {
        DatasetSource::Synthetic {
            users: cfg.users,
            tokens_per_user: cfg.tokens_per_user,
            vocab: cfg.vocab,
            heterogeneity: cfg.heterogeneity,
            seed: cfg.seed,
            eval_users,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `bigram_softmax` or `tiny_rnn`.
    pub name: String,
    /// Hidden width for `tiny_rnn`; ignored otherwise.
    pub hidden: usize,
}

/// A population to report the privacy guarantee for, independent of the
/// simulated one. The accountant only sees `(q, z, rounds, delta)`, so a
/// small simulation at noise scale `z` can quote epsilon for a large
/// deployment with `expected_users / users` sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredPopulation {
    pub users: u64,
    pub expected_users: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub unroll: usize,
    /// Per-user example cap: a user with `n` predictions has weight `min(n / cap, 1)`.
    pub example_cap: f64,
    pub training: TrainingConfig,
    /// Write a checkpoint every this many rounds (and always after the last).
    pub checkpoint_every: u64,
    /// Evaluations averaged when smoothing accuracy curves.
    pub smoothing_window: usize,
    #[serde(default)]
    pub declared: Option<DeclaredPopulation>,
}

pub const PRESETS: [&str; 7] = ["baseline", "sampling", "estimator", "clipping", "dp", "noise", "table2-row"];

/// Flat clipping bound for the clipped presets: near the median update norm
/// of the default bigram model at learning rate 6.
pub const DEFAULT_CLIP: f64 = 6.5;

impl Default for ExperimentConfig {
    fn default() -> Self {
        preset("dp").expect("dp preset exists")
    }
}

/// Desk-scale defaults: 1000 synthetic users of 1600 tokens, V=100, an
/// expected 50 users per round, FedAvg with one epoch of batch-8 SGD at
/// learning rate 6. The presets walk through the tuning sequence: fixed
/// sampling, then Poisson sampling, then the bounded estimator, then
/// clipping, then noise.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let synthesis = SynthesisConfig::default();
    let q = 50.0 / synthesis.users as f64;
    let training = TrainingConfig {
        q,
        z: 1.0,
        estimator: EstimatorKind::FixedDenominator,
        clip: ClipConfig::flat(DEFAULT_CLIP),
        algorithm: Algorithm::FedAvg {
            epochs: 1,
            batch_size: BatchSize::Sequences(8),
            learning_rate: 6.0,
        },
        rounds: 500,
        noise_enabled: true,
        ..TrainingConfig::default()
    };
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::synthetic(&synthesis, DEFAULT_EVAL_USERS),
        model: ModelConfig {
            name: "bigram_softmax".into(),
            hidden: 16,
        },
        unroll: DEFAULT_UNROLL,
        example_cap: synthesis.tokens_per_user as f64,
        training,
        checkpoint_every: 100,
        smoothing_window: 5,
        declared: None,
    };
    let t = &mut cfg.training;
    match name {
        "baseline" => {
            t.fixed_sample_size = Some(50);
            t.clip = ClipConfig::disabled();
            t.noise_enabled = false;
        }
        "sampling" => {
            t.clip = ClipConfig::disabled();
            t.noise_enabled = false;
        }
        "estimator" => {
            t.estimator = EstimatorKind::ClippedDenominator;
            t.clip = ClipConfig::disabled();
            t.noise_enabled = false;
        }
        "clipping" => {
            t.noise_enabled = false;
        }
        "dp" | "noise" => {}
        "table2-row" => {
            t.rounds = 5000;
            t.clip = ClipConfig::flat(15.0);
            cfg.declared = Some(DeclaredPopulation {
                users: 763_430,
                expected_users: 5000.0,
                delta: 1e-9,
            });
        }
        other => {
            return Err(DpfedError::config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| DpfedError::Config(format!("{}: {e}", path.display())))
}

pub fn to_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    Flat,
    PerLayer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmChoice {
    FedAvg,
    FedSgd,
}

/// Command-line adjustments applied on top of a preset or config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<u64>,
    pub q: Option<f64>,
    pub z: Option<f64>,
    pub clip_mode: Option<ClipMode>,
    pub clip_bound: Option<f64>,
    pub estimator: Option<EstimatorKind>,
    pub algorithm: Option<AlgorithmChoice>,
    pub learning_rate: Option<f64>,
    pub noise: Option<bool>,
}

impl ExperimentConfig {
    pub fn build_model(&self) -> Result<BuiltinModel> {
        let vocab = match &self.dataset {
            DatasetSource::Synthetic { vocab, .. } => *vocab,
            DatasetSource::Files { dir } => crate::dataset::load_manifest(dir)?.vocab,
        };
        Ok(BuiltinModel::by_name(&self.model.name, vocab, self.model.hidden)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 {
            return Err(DpfedError::config("unroll must be positive"));
        }
        if !(self.example_cap > 0.0) {
            return Err(DpfedError::config("example_cap must be positive"));
        }
        if self.checkpoint_every == 0 || self.smoothing_window == 0 {
            return Err(DpfedError::config("checkpoint_every and smoothing_window must be positive"));
        }
        if let Some(d) = self.declared {
            if !(d.expected_users > 0.0 && d.expected_users <= d.users as f64) {
                return Err(DpfedError::config("declared expected_users must lie in (0, users]"));
            }
            if !(d.delta > 0.0 && d.delta < 1.0) {
                return Err(DpfedError::config("declared delta must lie in (0, 1)"));
            }
            if !self.training.noise_enabled {
                return Err(DpfedError::config("a declared population needs noise enabled"));
            }
        }
        if let DatasetSource::Synthetic { eval_users: 0, .. } = self.dataset {
            return Err(DpfedError::config("need at least one evaluation user"));
        }
        Ok(())
    }

    /// Applies `o`. Returns a warning when the learning rate moved but the
    /// clipping bound did not, since good bounds scale with the step size.
    pub fn apply(&mut self, o: &Overrides) -> Result<Option<String>> {
        let layers = match o.clip_mode {
            Some(ClipMode::PerLayer) => Some(self.build_model()?.shape().num_layers()),
            _ => None,
        };
        let t = &mut self.training;
        if let Some(seed) = o.seed {
            t.seed = seed;
        }
        if let Some(rounds) = o.rounds {
            t.rounds = rounds;
        }
        if let Some(q) = o.q {
            t.q = q;
        }
        if let Some(z) = o.z {
            t.z = z;
        }
        if let Some(noise) = o.noise {
            t.noise_enabled = noise;
        }
        if let Some(e) = o.estimator {
            t.estimator = e;
        }
        let lr = o.learning_rate.unwrap_or_else(|| t.algorithm.learning_rate());
        if let Some(choice) = o.algorithm {
            t.algorithm = match (choice, t.algorithm) {
                (AlgorithmChoice::FedAvg, a @ Algorithm::FedAvg { .. }) => a,
                (AlgorithmChoice::FedSgd, a @ Algorithm::FedSgd { .. }) => a,
                (AlgorithmChoice::FedAvg, _) => Algorithm::FedAvg {
                    epochs: 1,
                    batch_size: BatchSize::Sequences(8),
                    learning_rate: lr,
                },
                (AlgorithmChoice::FedSgd, _) => Algorithm::FedSgd {
                    batch_size: BatchSize::Full,
                    learning_rate: lr,
                },
            };
        }
        match &mut t.algorithm {
            Algorithm::FedAvg { learning_rate, .. } | Algorithm::FedSgd { learning_rate, .. } => *learning_rate = lr,
        }

        let mode = o.clip_mode.unwrap_or(match t.clip {
            _ if t.clip.is_disabled() => ClipMode::None,
            ClipConfig::Flat { .. } => ClipMode::Flat,
            ClipConfig::PerLayer { .. } => ClipMode::PerLayer,
        });
        if o.clip_mode.is_some() || o.clip_bound.is_some() {
            let bound = o.clip_bound.unwrap_or(if t.clip.is_disabled() { DEFAULT_CLIP } else { t.clip.total_bound() });
            t.clip = match mode {
                ClipMode::None => {
                    if o.clip_bound.is_some() {
                        return Err(DpfedError::config("--S given with clipping disabled"));
                    }
                    ClipConfig::disabled()
                }
                ClipMode::Flat => ClipConfig::flat(bound),
                ClipMode::PerLayer => match (layers, &t.clip) {
                    (Some(m), _) => ClipConfig::per_layer_uniform(bound, m),
                    (None, ClipConfig::PerLayer { bounds }) => ClipConfig::per_layer_uniform(bound, bounds.len()),
                    (None, _) => unreachable!("per-layer mode without a layer count"),
                },
            };
        }
        let warning = (o.learning_rate.is_some() && o.clip_bound.is_none()).then(|| {
            format!(
                "learning rate set to {lr} without a new clipping bound (S stays {}); re-tune S for the new step size",
                self.training.clip.total_bound()
            )
        });
        Ok(warning)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_json() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&to_json(&cfg)).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&preset("dp").unwrap())).unwrap();
        v["unrol"] = 3.into();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = preset("dp").unwrap();
        let warn = cfg
            .apply(&Overrides {
                clip_mode: Some(ClipMode::PerLayer),
                clip_bound: Some(2.0),
                algorithm: Some(AlgorithmChoice::FedSgd),
                z: Some(0.5),
                ..Overrides::default()
            })
            .unwrap();
        assert!(warn.is_none());
        assert_eq!(cfg.training.clip, ClipConfig::per_layer_uniform(2.0, 2));
        assert_eq!(
            cfg.training.algorithm,
            Algorithm::FedSgd {
                batch_size: BatchSize::Full,
                learning_rate: 6.0
            }
        );
        assert_eq!(cfg.training.z, 0.5);

        let warn = cfg
            .apply(&Overrides {
                learning_rate: Some(1.0),
                ..Overrides::default()
            })
            .unwrap();
        assert!(warn.unwrap().contains("re-tune S"));

        let mut none = preset("dp").unwrap();
        none.apply(&Overrides {
            clip_mode: Some(ClipMode::None),
            ..Overrides::default()
        })
        .unwrap();
        assert!(none.training.clip.is_disabled());
        assert!(none
            .apply(&Overrides {
                clip_mode: Some(ClipMode::None),
                clip_bound: Some(1.0),
                ..Overrides::default()
            })
            .is_err());
    }
}
