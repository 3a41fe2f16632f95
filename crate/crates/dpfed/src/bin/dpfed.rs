use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpfed::compare::{compare, Series};
use dpfed::config::{self, AlgorithmChoice, ClipMode, ExperimentConfig, Overrides};
use dpfed::dataset::{write_synthetic, DEFAULT_EVAL_USERS};
use dpfed::exec::RayonExecutor;
use dpfed::run::{self, PrivacyReport};
use dpfed::table;
use dpfed::{DpfedError, Result};
use dpfed_core::estimators::EstimatorKind;
use dpfed_core::model::SynthesisConfig;

#[derive(Parser)]
#[command(name = "dpfed", version, about = "User-level differentially private federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Epsilon after 10^0..10^6 rounds for (K, C~, z) rows, as CSV.
    PrivacyTable(TableArgs),
    /// Write a synthetic next-token dataset (JSON lines plus manifest).
    Synthesize(SynthArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Continue a run from one of its checkpoints.
    Resume(ResumeArgs),
    /// Align and smooth accuracy curves of two or more runs.
    Compare(CompareArgs),
    /// Print a preset as a config file.
    ShowPreset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(config::PRESETS))]
        name: String,
    },
}

#[derive(Args)]
struct TableArgs {
    /// A row as `K,C,z`; repeatable. Defaults to a standard set of six rows.
    #[arg(long = "row", value_parser = table::parse_row)]
    rows: Vec<dpfed_core::accountant::TableRow>,
    /// Round counts to report at.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<u64>>,
    /// Fixed delta instead of K^-1.1.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 1600)]
    tokens: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 0.3)]
    heterogeneity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_USERS)]
    eval_users: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipModeArg {
    Flat,
    PerLayer,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Fixed,
    Clipped,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Fedavg,
    Fedsgd,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file (see `dpfed show-preset dp` for the schema).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(config::PRESETS))]
    preset: Option<String>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u64>,
    /// User sampling probability.
    #[arg(long)]
    q: Option<f64>,
    /// Noise scale (sigma over sensitivity).
    #[arg(long)]
    z: Option<f64>,
    #[arg(long, value_enum)]
    clip_mode: Option<ClipModeArg>,
    /// Total clipping bound.
    #[arg(long = "S")]
    clip_bound: Option<f64>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    lr: Option<f64>,
    /// Disable noise (and privacy accounting).
    #[arg(long)]
    no_noise: bool,
    /// Worker threads (default: one per CPU). Does not change results.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ResumeArgs {
    run: PathBuf,
    /// Checkpoint round to restart from (default: latest).
    #[arg(long)]
    from_round: Option<u64>,
    /// New total number of rounds.
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    /// Evaluations per smoothing window.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Flag runs whose final smoothed accuracy differs from the first by more than this.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| DpfedError::Io {
            path: p.to_owned(),
            source,
        })?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn csv_error(path: Option<&Path>, source: csv::Error) -> DpfedError {
    DpfedError::Csv {
        path: path.map_or_else(|| "<stdout>".into(), Path::to_owned),
        source,
    }
}

fn privacy_table(a: TableArgs) -> Result<()> {
    let rows = if a.rows.is_empty() { table::DEFAULT_ROWS.to_vec() } else { a.rows };
    let checkpoints = a.checkpoints.unwrap_or_else(table::default_checkpoints);
    let entries = table::table(&rows, &checkpoints, a.delta)?;
    table::write_csv(&entries, output(a.out.as_deref())?).map_err(|e| csv_error(a.out.as_deref(), e))
}

fn synthesize(a: SynthArgs) -> Result<()> {
    let cfg = SynthesisConfig {
        users: a.users,
        tokens_per_user: a.tokens,
        vocab: a.vocab,
        heterogeneity: a.heterogeneity,
        seed: a.seed,
    };
    let m = write_synthetic(&a.out, &cfg, a.eval_users)?;
    println!(
        "wrote {} training users ({} tokens) and {} evaluation users to {}",
        m.train_users,
        m.train_tokens,
        m.eval_users,
        a.out.display()
    );
    Ok(())
}

fn print_report(run: &Path, report: &PrivacyReport) {
    println!("{}", report.summary_line());
    println!("run written to {}", run.display());
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = match (&a.config, &a.preset) {
        (Some(path), _) => config::load(path)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        seed: a.seed,
        rounds: a.rounds,
        q: a.q,
        z: a.z,
        clip_mode: a.clip_mode.map(|m| match m {
            ClipModeArg::Flat => ClipMode::Flat,
            ClipModeArg::PerLayer => ClipMode::PerLayer,
            ClipModeArg::None => ClipMode::None,
        }),
        clip_bound: a.clip_bound,
        estimator: a.estimator.map(|e| match e {
            EstimatorArg::Fixed => EstimatorKind::FixedDenominator,
            EstimatorArg::Clipped => EstimatorKind::ClippedDenominator,
        }),
        algorithm: a.algorithm.map(|x| match x {
            AlgorithmArg::Fedavg => AlgorithmChoice::FedAvg,
            AlgorithmArg::Fedsgd => AlgorithmChoice::FedSgd,
        }),
        learning_rate: a.lr,
        noise: a.no_noise.then_some(false),
    };
    if let Some(warning) = cfg.apply(&overrides)? {
        log::warn!("{warning}");
    }
    log::info!(
        "training {} rounds, q={}, z={}, clip={:?}",
        cfg.training.rounds,
        cfg.training.q,
        cfg.training.z,
        cfg.training.clip
    );
    let exec = RayonExecutor::new(a.threads)?;
    let report = run::train(&cfg, &a.out, &exec)?;
    print_report(&a.out, &report);
    Ok(())
}

fn resume(a: ResumeArgs) -> Result<()> {
    let exec = RayonExecutor::new(a.threads)?;
    let report = run::resume(&a.run, a.from_round, a.rounds, &exec)?;
    print_report(&a.run, &report);
    Ok(())
}

fn compare_runs(a: CompareArgs) -> Result<()> {
    let series = a.runs.iter().map(|r| Series::read(r)).collect::<Result<Vec<_>>>()?;
    let cmp = compare(&series, a.window)?;
    cmp.write_csv(output(a.out.as_deref())?)
        .map_err(|e| csv_error(a.out.as_deref(), e))?;
    let last = cmp.rounds.last().unwrap();
    for ((name, s), d) in cmp.names.iter().zip(&cmp.smoothed).zip(cmp.final_deltas()) {
        let flag = match a.threshold {
            Some(t) if d.abs() > t => " EXCEEDS THRESHOLD",
            _ => "",
        };
        eprintln!("{name}: accuracy_top1 {:.4} at round {last}, delta {d:+.4}{flag}", s.last().unwrap());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrivacyTable(a) => privacy_table(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Resume(a) => resume(a),
        Command::Compare(a) => compare_runs(a),
        Command::ShowPreset { name } => config::preset(&name).map(|c| print!("{}", config::to_json(&c))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
