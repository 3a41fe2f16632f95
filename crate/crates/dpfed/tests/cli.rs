use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpfed::config::{preset, to_json, DatasetSource, ExperimentConfig};
use dpfed::dataset::load_dir;
use dpfed::run::{read_metrics, read_run_record, PrivacyReport};

fn dpfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfed"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dpfed(args);
    assert!(
        out.status.success(),
        "dpfed {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small(name: &str, rounds: u64) -> ExperimentConfig {
    let mut cfg = preset(name).unwrap();
    cfg.dataset = DatasetSource::Synthetic {
        users: 200,
        tokens_per_user: 101,
        vocab: 12,
        heterogeneity: 0.3,
        seed: 4,
        eval_users: 5,
    };
    cfg.example_cap = 100.0;
    cfg.training.rounds = rounds;
    cfg.training.q = 0.1;
    if let Some(c) = cfg.training.fixed_sample_size.as_mut() {
        *c = 20;
    }
    if !cfg.training.clip.is_disabled() {
        cfg.training.clip = dpfed_core::ClipConfig::flat(2.0);
    }
    cfg.checkpoint_every = 20;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, to_json(cfg)).unwrap();
    path
}

fn report(run: &Path) -> PrivacyReport {
    serde_json::from_slice(&fs::read(run.join("privacy_report.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn privacy_table_defaults() {
    let out = ok(&["privacy-table"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 43);
    assert_eq!(lines[0], "users,expected_users,q,z,rounds,delta,epsilon");
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&first[..2], &["100000", "100"]);
    let eps: f64 = first[6].parse().unwrap();
    assert!((eps - 0.97).abs() <= 0.02, "{eps}");
}

#[test]
fn privacy_table_custom_row_and_delta() {
    let out = ok(&["privacy-table", "--row", "763430,5000,1", "--checkpoints", "5000", "--delta", "1e-9"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let eps: f64 = text.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((eps - 4.634).abs() <= 0.01 * 4.634, "{eps}");
}

#[test]
fn synthesize_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synthesize", "--out", s(&a)]);
    ok(&["synthesize", "--out", s(&b)]);
    for f in ["train.jsonl", "eval.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let d = load_dir(&a).unwrap();
    assert_eq!(d.train.len(), 1000);
    assert!(d.train.iter().all(|(_, t)| t.len() == 1600));
    let counted: usize = d.train.iter().map(|(_, t)| t.len()).sum();
    assert_eq!(counted, 1000 * 1600);
    assert_eq!(d.manifest.train_tokens, counted);
    assert_eq!(d.manifest.synthesis.unwrap().seed, 0);
}

#[test]
fn baseline_and_dp_presets_emit_comparable_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let base_cfg = write_config(dir.path(), "baseline", &small("baseline", 40));
    let dp_cfg = write_config(dir.path(), "dp", &small("dp", 40));
    let (base, dp) = (dir.path().join("baseline"), dir.path().join("dp"));
    ok(&["train", "--config", s(&base_cfg), "--out", s(&base)]);
    ok(&["train", "--config", s(&dp_cfg), "--out", s(&dp)]);

    let header = |run: &Path| fs::read_to_string(run.join("metrics.csv")).unwrap().lines().next().unwrap().to_owned();
    assert_eq!(header(&base), header(&dp));
    assert!(header(&base).starts_with("round,accuracy_top1,loss,epsilon,sigma,frac_clipped"));

    let b = read_metrics(&base).unwrap();
    assert!(b.iter().all(|r| r.sampled_users == 20 && r.epsilon.is_none() && r.sigma == 0.0));
    let d = read_metrics(&dp).unwrap();
    assert!(d.iter().all(|r| r.epsilon.is_some() && r.sigma > 0.0));
    assert_eq!(d.iter().filter(|r| r.accuracy_top1.is_some()).count(), 2);

    let record = read_run_record(&dp).unwrap();
    assert!(record.code_version.starts_with("dpfed "));
    assert_eq!(record.config, small("dp", 40));

    let out = ok(&["compare", s(&base), s(&dp)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("round,accuracy_top1:baseline,accuracy_top1:dp,delta:dp\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn declared_population_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("table2-row").unwrap();
    cfg.dataset = DatasetSource::Synthetic {
        users: 1000,
        tokens_per_user: 21,
        vocab: 10,
        heterogeneity: 0.3,
        seed: 1,
        eval_users: 2,
    };
    cfg.example_cap = 20.0;
    cfg.checkpoint_every = 5000;
    cfg.training.eval_every = 500;
    assert_eq!(cfg.training.rounds, 5000);
    let path = write_config(dir.path(), "t2", &cfg);
    let run = dir.path().join("run");
    let out = ok(&["train", "--config", s(&path), "--out", s(&run)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("declared: sigma=0.0030 S=15.0000 K=763430 C~=5000"), "{stdout}");

    let r = report(&run);
    let d = r.declared.unwrap();
    assert!((d.epsilon - 4.634).abs() <= 0.01 * 4.634, "{}", d.epsilon);
    assert_eq!(d.delta, 1e-9);
    assert!((d.sigma - 0.003).abs() < 1e-15);
    assert_eq!(r.z, 1.0);
    assert_eq!(r.rounds, 5000);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_cfg = write_config(dir.path(), "full", &small("dp", 60));
    let short_cfg = write_config(dir.path(), "short", &small("dp", 40));
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    ok(&["train", "--config", s(&full_cfg), "--out", s(&full)]);
    ok(&["train", "--config", s(&short_cfg), "--out", s(&part)]);
    ok(&["resume", s(&part), "--rounds", "60"]);
    for f in ["metrics.csv", "rounds.jsonl", "privacy_report.json", "config.json"] {
        assert_eq!(
            fs::read_to_string(full.join(f)).unwrap(),
            fs::read_to_string(part.join(f)).unwrap(),
            "{f}"
        );
    }

    // restarting a finished run from an earlier checkpoint rewrites the same history
    ok(&["resume", s(&full), "--from-round", "20"]);
    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(part.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoints/round-00000060/params.bin")).unwrap(),
        fs::read(part.join("checkpoints/round-00000060/params.bin")).unwrap()
    );
}

#[test]
fn tiny_noise_barely_moves_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c", &small("dp", 60));
    let (clean, tiny) = (dir.path().join("clean"), dir.path().join("tiny"));
    ok(&["train", "--config", s(&cfg), "--out", s(&clean), "--no-noise"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&tiny), "--z", "0.001"]);
    let out = ok(&["compare", s(&clean), s(&tiny), "--threshold", "0.01"]);
    let summary = String::from_utf8(out.stderr).unwrap();
    assert!(!summary.contains("EXCEEDS"), "{summary}");

    let out = ok(&["compare", s(&clean), s(&clean)]);
    let table = String::from_utf8(out.stdout).unwrap();
    for line in table.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn exit_codes_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c", &small("dp", 20));

    let out = dpfed(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("a")), "--q", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"dataset\": 3}").unwrap();
    let out = dpfed(&["train", "--config", s(&bad), "--out", s(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(1));

    let mut missing = small("dp", 20);
    missing.dataset = DatasetSource::Files {
        dir: dir.path().join("nowhere"),
    };
    let missing = write_config(dir.path(), "missing", &missing);
    let out = dpfed(&["train", "--config", s(&missing), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));

    let run = dir.path().join("d");
    let out = dpfed(&["train", "--config", s(&cfg), "--out", s(&run), "--lr", "2"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("re-tune S"));
    // refuses to overwrite
    let out = dpfed(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));

    let mut other = small("dp", 20);
    other.training.eval_every = 5;
    let other = write_config(dir.path(), "other", &other);
    let run2 = dir.path().join("e");
    ok(&["train", "--config", s(&other), "--out", s(&run2)]);
    let out = dpfed(&["compare", s(&run), s(&run2)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aligned"));
}

#[test]
fn training_from_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synthesize", "--out", s(&data), "--users", "50", "--tokens", "60", "--vocab", "9", "--eval-users", "3"]);
    let mut cfg = small("clipping", 10);
    cfg.dataset = DatasetSource::Files { dir: data };
    cfg.example_cap = 59.0;
    let path = write_config(dir.path(), "files", &cfg);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&path), "--out", s(&run), "--clip-mode", "per-layer", "--S", "1.5", "--algorithm", "fedsgd"]);
    let record = read_run_record(&run).unwrap();
    assert!((record.config.training.clip.total_bound() - 1.5).abs() < 1e-12);
    assert_eq!(read_metrics(&run).unwrap().len(), 10);
    let r = report(&run);
    assert_eq!(r.users, 50);
    assert!(r.epsilon.is_none());
}

#[test]
fn show_preset_is_a_valid_config() {
    let out = ok(&["show-preset", "dp"]);
    let cfg: ExperimentConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg, preset("dp").unwrap());
}
