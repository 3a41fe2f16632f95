//! Run directories: training, checkpoints, resume and the privacy report.
//!
//! ```text
//! <run>/config.json            ExperimentConfig plus the code version that wrote it
//! <run>/metrics.csv            one row per round
//! <run>/rounds.jsonl           the full RoundLog per round
//! <run>/checkpoints/round-NNNNNNNN/{params.bin,state.json}
//! <run>/privacy_report.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dpfed_core::accountant::MomentsAccountant;
use dpfed_core::fedtrain::{Executor, RoundLog, Trainer, TrainerState};
use dpfed_core::model::{split_sequences, BuiltinModel, Model, SynthesisConfig, TokenDataset};
use serde::{Deserialize, Serialize};

use crate::codec::{read_params, write_params};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::dataset::{load_dir, synthesize_split};
use crate::error::{DpfedError, IoContext, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const REPORT_FILE: &str = "privacy_report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const PARAMS_FILE: &str = "params.bin";
const STATE_FILE: &str = "state.json";

pub const CODE_VERSION: &str = concat!("dpfed ", env!("CARGO_PKG_VERSION"));

/// What `config.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub code_version: String,
    pub config: ExperimentConfig,
}

/// One row of `metrics.csv`. Evaluation columns are empty on rounds
/// without an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub accuracy_top1: Option<f64>,
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub sigma: f64,
    pub frac_clipped: f64,
    pub sampled_users: usize,
    pub sample_weight: f64,
    pub update_norm: f64,
    pub norm_min: Option<f64>,
    pub norm_median: Option<f64>,
    pub norm_max: Option<f64>,
}

impl From<&RoundLog> for MetricsRow {
    fn from(log: &RoundLog) -> Self {
        MetricsRow {
            round: log.round,
            accuracy_top1: log.eval.as_ref().map(|m| m.accuracy_top1),
            loss: log.eval.as_ref().map(|m| m.loss),
            epsilon: log.epsilon,
            sigma: log.sigma,
            frac_clipped: log.frac_clipped,
            sampled_users: log.sampled_users,
            sample_weight: log.sample_weight,
            update_norm: log.update_norm,
            norm_min: log.norm_min,
            norm_median: log.norm_median,
            norm_max: log.norm_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointState {
    round: u64,
    accountant: Option<MomentsAccountant>,
}

/// Guarantee quoted for a declared population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredReport {
    pub users: u64,
    pub expected_users: f64,
    pub q: f64,
    pub delta: f64,
    /// `z * S / C~`: the noise that population would need with unit user weights.
    pub sigma: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub rounds: u64,
    pub users: usize,
    pub expected_users: f64,
    pub q: f64,
    pub noise_enabled: bool,
    pub z: f64,
    pub sigma: f64,
    /// `None` when clipping is disabled.
    pub clip_bound: Option<f64>,
    pub delta: f64,
    pub epsilon: Option<f64>,
    pub accuracy_top1: Option<f64>,
    /// Mean of the last `smoothing_window` evaluations.
    pub smoothed_accuracy_top1: Option<f64>,
    pub mean_frac_clipped: f64,
    pub declared: Option<DeclaredReport>,
}

impl PrivacyReport {
    /// A one-line summary in the order sigma, S, K, C~, epsilon, accuracy.
    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut line = format!(
            "sigma={:.3e} S={} K={} C~={:.1} rounds={} eps={} (delta={:.3e}) acc={} acc_smoothed={}",
            self.sigma,
            fmt(self.clip_bound, 4),
            self.users,
            self.expected_users,
            self.rounds,
            fmt(self.epsilon, 3),
            self.delta,
            fmt(self.accuracy_top1, 4),
            fmt(self.smoothed_accuracy_top1, 4),
        );
        if let Some(d) = &self.declared {
            line.push_str(&format!(
                "\ndeclared: sigma={:.4} S={} K={} C~={} eps={:.3} (delta={:.0e})",
                d.sigma,
                fmt(self.clip_bound, 4),
                d.users,
                d.expected_users,
                d.epsilon,
                d.delta
            ));
        }
        line
    }
}

/// Model, training users and evaluation sequences for a config.
pub struct Workload {
    pub model: BuiltinModel,
    pub data: TokenDataset,
    eval_tokens: Vec<Vec<u32>>,
    unroll: usize,
}

impl Workload {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, eval, vocab) = match &cfg.dataset {
            DatasetSource::Synthetic {
                users,
                tokens_per_user,
                vocab,
                heterogeneity,
                seed,
                eval_users,
            } => {
                let s = SynthesisConfig {
                    users: *users,
                    tokens_per_user: *tokens_per_user,
                    vocab: *vocab,
                    heterogeneity: *heterogeneity,
                    seed: *seed,
                };
                let (train, eval) = synthesize_split(&s, *eval_users)?;
                (train, eval, *vocab)
            }
            DatasetSource::Files { dir } => {
                let d = load_dir(dir)?;
                (d.train, d.eval, d.manifest.vocab)
            }
        };
        let model = cfg.build_model()?;
        if model.vocab_size() != vocab {
            return Err(DpfedError::config("model vocabulary differs from the dataset's"));
        }
        let data = TokenDataset::new(train, vocab, cfg.unroll, cfg.example_cap)?;
        // validates tokens
        TokenDataset::new(eval.clone(), vocab, cfg.unroll, cfg.example_cap)?;
        Ok(Workload {
            model,
            data,
            eval_tokens: eval.into_iter().map(|(_, t)| t).collect(),
            unroll: cfg.unroll,
        })
    }

    pub fn eval_sequences(&self) -> Vec<&[u32]> {
        self.eval_tokens
            .iter()
            .flat_map(|t| split_sequences(t, self.unroll))
            .collect()
    }
}

fn checkpoint_dir(run: &Path, round: u64) -> PathBuf {
    run.join(CHECKPOINT_DIR).join(format!("round-{round:08}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).at(path)? + "\n";
    fs::write(path, text).at(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path).at(path)?).at(path)
}

fn write_checkpoint(run: &Path, state: &TrainerState) -> Result<()> {
    let dir = checkpoint_dir(run, state.round);
    fs::create_dir_all(&dir).at(&dir)?;
    write_params(&dir.join(PARAMS_FILE), &state.params)?;
    write_json(
        &dir.join(STATE_FILE),
        &CheckpointState {
            round: state.round,
            accountant: state.accountant.clone(),
        },
    )
}

/// Rounds that have a checkpoint, ascending.
pub fn list_checkpoints(run: &Path) -> Result<Vec<u64>> {
    let dir = run.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut rounds = Vec::new();
    for entry in fs::read_dir(&dir).at(&dir)? {
        let name = entry.at(&dir)?.file_name();
        if let Some(r) = name.to_str().and_then(|n| n.strip_prefix("round-")).and_then(|n| n.parse().ok()) {
            rounds.push(r);
        }
    }
    rounds.sort_unstable();
    Ok(rounds)
}

pub fn load_checkpoint(run: &Path, round: u64) -> Result<TrainerState> {
    let dir = checkpoint_dir(run, round);
    let state: CheckpointState = read_json(&dir.join(STATE_FILE))?;
    if state.round != round {
        return Err(DpfedError::Format {
            path: dir.join(STATE_FILE),
            message: format!("records round {} but lives in the round {round} directory", state.round),
        });
    }
    Ok(TrainerState {
        round,
        params: read_params(&dir.join(PARAMS_FILE))?,
        accountant: state.accountant,
    })
}

pub fn read_run_record(run: &Path) -> Result<RunRecord> {
    read_json(&run.join(CONFIG_FILE))
}

pub fn read_metrics(run: &Path) -> Result<Vec<MetricsRow>> {
    let path = run.join(METRICS_FILE);
    let mut r = csv::Reader::from_path(&path).at(&path)?;
    r.deserialize().collect::<csv::Result<Vec<MetricsRow>>>().at(&path)
}

/// Keeps the header (when `header`) and the lines whose round is at most `round`.
fn truncate_after(path: &Path, round: u64, header: bool, round_of: impl Fn(&str) -> Option<u64>) -> Result<()> {
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let keep = (header && i == 0) || round_of(line).is_some_and(|r| r <= round);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).at(path)
}

struct Sinks {
    metrics: csv::Writer<BufWriter<File>>,
    rounds: BufWriter<File>,
    metrics_path: PathBuf,
    rounds_path: PathBuf,
}

impl Sinks {
    fn open(run: &Path, append: bool) -> Result<Self> {
        let metrics_path = run.join(METRICS_FILE);
        let rounds_path = run.join(ROUNDS_FILE);
        let open = |p: &Path| -> Result<File> {
            if append {
                OpenOptions::new().append(true).open(p).at(p)
            } else {
                File::create(p).at(p)
            }
        };
        let metrics = csv::WriterBuilder::new()
            .has_headers(!append)
            .from_writer(BufWriter::new(open(&metrics_path)?));
        let rounds = BufWriter::new(open(&rounds_path)?);
        Ok(Sinks {
            metrics,
            rounds,
            metrics_path,
            rounds_path,
        })
    }

    fn push(&mut self, log: &RoundLog) -> Result<()> {
        self.metrics.serialize(MetricsRow::from(log)).at(&self.metrics_path)?;
        let line = serde_json::to_string(log).at(&self.rounds_path)?;
        writeln!(self.rounds, "{line}").at(&self.rounds_path)
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().at(&self.metrics_path)?;
        self.rounds.flush().at(&self.rounds_path)
    }
}

fn drive<E: Executor + ?Sized>(
    run: &Path,
    cfg: &ExperimentConfig,
    trainer: &mut Trainer<'_, BuiltinModel>,
    sinks: &mut Sinks,
    exec: &E,
) -> Result<()> {
    while !trainer.is_finished() {
        let log = trainer.step(exec)?;
        sinks.push(&log)?;
        if let Some(m) = &log.eval {
            log::info!(
                "round {}: accuracy {:.4} loss {:.4} eps {} clipped {:.2}",
                log.round,
                m.accuracy_top1,
                m.loss,
                log.epsilon.map_or("-".into(), |e| format!("{e:.3}")),
                log.frac_clipped
            );
        }
        if log.round % cfg.checkpoint_every == 0 || trainer.is_finished() {
            sinks.flush()?;
            write_checkpoint(run, trainer.state())?;
        }
    }
    sinks.flush()
}

/// Trains `cfg` from scratch into the empty (or new) directory `run`.
pub fn train<E: Executor + ?Sized>(cfg: &ExperimentConfig, run: &Path, exec: &E) -> Result<PrivacyReport> {
    if run.join(CONFIG_FILE).exists() {
        return Err(DpfedError::config(format!(
            "{} already holds a run; resume it or pick another --out",
            run.display()
        )));
    }
    let work = Workload::load(cfg)?;
    let eval = work.eval_sequences();
    let mut trainer = Trainer::new(cfg.training.clone(), &work.model, &work.data, &eval)?;
    fs::create_dir_all(run).at(run)?;
    write_json(
        &run.join(CONFIG_FILE),
        &RunRecord {
            code_version: CODE_VERSION.into(),
            config: cfg.clone(),
        },
    )?;
    let mut sinks = Sinks::open(run, false)?;
    drive(run, cfg, &mut trainer, &mut sinks, exec)?;
    finish(run, cfg, &work, &trainer)
}

/// Continues a run from its checkpoint at `from_round` (default: the
/// latest), discarding any logged rounds after it. `rounds` extends or
/// shortens the total, as long as it does not precede the checkpoint.
pub fn resume<E: Executor + ?Sized>(run: &Path, from_round: Option<u64>, rounds: Option<u64>, exec: &E) -> Result<PrivacyReport> {
    let mut record = read_run_record(run)?;
    let available = list_checkpoints(run)?;
    let round = match from_round {
        Some(r) if available.contains(&r) => r,
        Some(r) => return Err(DpfedError::config(format!("no checkpoint at round {r} (have {available:?})"))),
        None => *available
            .last()
            .ok_or_else(|| DpfedError::config(format!("{} has no checkpoints", run.display())))?,
    };
    if let Some(total) = rounds {
        if total < round {
            return Err(DpfedError::config(format!("cannot end at round {total} before checkpoint {round}")));
        }
        record.config.training.rounds = total;
    }
    let cfg = record.config.clone();
    let work = Workload::load(&cfg)?;
    let eval = work.eval_sequences();
    let state = load_checkpoint(run, round)?;
    let mut trainer = Trainer::resume(cfg.training.clone(), &work.model, &work.data, &eval, state)?;
    write_json(&run.join(CONFIG_FILE), &record)?;

    truncate_after(&run.join(METRICS_FILE), round, true, |l| l.split(',').next()?.parse().ok())?;
    truncate_after(&run.join(ROUNDS_FILE), round, false, |l| {
        serde_json::from_str::<serde_json::Value>(l).ok()?.get("round")?.as_u64()
    })?;
    for stale in list_checkpoints(run)?.into_iter().filter(|&r| r > round) {
        let dir = checkpoint_dir(run, stale);
        fs::remove_dir_all(&dir).at(&dir)?;
    }
    let mut sinks = Sinks::open(run, true)?;
    drive(run, &cfg, &mut trainer, &mut sinks, exec)?;
    finish(run, &cfg, &work, &trainer)
}

fn finish(run: &Path, cfg: &ExperimentConfig, work: &Workload, trainer: &Trainer<'_, BuiltinModel>) -> Result<PrivacyReport> {
    let rows = read_metrics(run)?;
    let report = build_report(cfg, work, trainer, &rows)?;
    write_json(&run.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn build_report(cfg: &ExperimentConfig, work: &Workload, trainer: &Trainer<'_, BuiltinModel>, rows: &[MetricsRow]) -> Result<PrivacyReport> {
    let t = &cfg.training;
    let k = work.data.len();
    let q = t.effective_q(k);
    let evals: Vec<f64> = rows.iter().filter_map(|r| r.accuracy_top1).collect();
    let window = cfg.smoothing_window.min(evals.len());
    let smoothed = (window > 0).then(|| evals[evals.len() - window..].iter().sum::<f64>() / window as f64);
    let mean_frac_clipped = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.frac_clipped).sum::<f64>() / rows.len() as f64
    };
    let clip_bound = (!t.clip.is_disabled()).then(|| t.clip.total_bound());
    let declared = match cfg.declared {
        Some(d) => {
            let dq = d.expected_users / d.users as f64;
            let mut acc = MomentsAccountant::new(dq)?;
            acc.accum_priv_spending(t.z, trainer.round())?;
            Some(DeclaredReport {
                users: d.users,
                expected_users: d.expected_users,
                q: dq,
                delta: d.delta,
                sigma: t.z * t.clip.total_bound() / d.expected_users,
                epsilon: acc.get_privacy_spent(d.delta)?,
            })
        }
        None => None,
    };
    Ok(PrivacyReport {
        rounds: trainer.round(),
        users: k,
        expected_users: q * k as f64,
        q,
        noise_enabled: t.noise_enabled,
        z: t.z,
        sigma: trainer.sigma(),
        clip_bound,
        delta: trainer.delta(),
        epsilon: trainer.epsilon()?,
        accuracy_top1: evals.last().copied(),
        smoothed_accuracy_top1: smoothed,
        mean_frac_clipped,
        declared,
    })
}
