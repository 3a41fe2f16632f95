//! Dataset files.
//!
//! A dataset directory holds `train.jsonl` and `eval.jsonl`, one user per
//! line as `{"user_id": u64, "tokens": [u32, ...]}`, plus `manifest.json`
//! describing how it was made.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dpfed_core::model::{synthesize_users, SynthesisConfig};
use serde::{Deserialize, Serialize};

use crate::error::{DpfedError, IoContext, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_EVAL_USERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub vocab: usize,
    /// How the data was generated, when it was.
    #[serde(default)]
    pub synthesis: Option<SynthesisConfig>,
    pub eval_users: usize,
    pub train_file: String,
    pub eval_file: String,
    pub train_users: usize,
    pub train_tokens: usize,
    pub eval_tokens: usize,
}

pub fn write_jsonl(path: &Path, users: &[(u64, Vec<u32>)]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for (user_id, tokens) in users {
        let line = serde_json::to_string(&UserRecord {
            user_id: *user_id,
            tokens: tokens.clone(),
        })
        .at(path)?;
        writeln!(w, "{line}").at(path)?;
    }
    w.flush().at(path)
}

/// A user id and that user's token stream.
pub type UserTokens = (u64, Vec<u32>);

pub fn read_jsonl(path: &Path) -> Result<Vec<UserTokens>> {
    let file = File::open(path).at(path)?;
    let mut users = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserRecord = serde_json::from_str(&line).map_err(|e| DpfedError::Format {
            path: path.to_owned(),
            message: format!("line {}: {e}", i + 1),
        })?;
        users.push((rec.user_id, rec.tokens));
    }
    Ok(users)
}

fn token_count(users: &[(u64, Vec<u32>)]) -> usize {
    users.iter().map(|(_, t)| t.len()).sum()
}

/// Training users get ids `0..K`; evaluation users continue at `K`.
pub fn synthesize_split(cfg: &SynthesisConfig, eval_users: usize) -> Result<(Vec<UserTokens>, Vec<UserTokens>)> {
    let k = cfg.users as u64;
    let train = synthesize_users(cfg, 0..k)?;
    let eval = synthesize_users(cfg, k..k + eval_users as u64)?;
    Ok((train, eval))
}

pub fn write_synthetic(dir: &Path, cfg: &SynthesisConfig, eval_users: usize) -> Result<Manifest> {
    if eval_users == 0 {
        return Err(DpfedError::config("need at least one evaluation user"));
    }
    let (train, eval) = synthesize_split(cfg, eval_users)?;
    fs::create_dir_all(dir).at(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), &train)?;
    write_jsonl(&dir.join(EVAL_FILE), &eval)?;
    let manifest = Manifest {
        generator: format!("dpfed {}", env!("CARGO_PKG_VERSION")),
        vocab: cfg.vocab,
        synthesis: Some(cfg.clone()),
        eval_users,
        train_file: TRAIN_FILE.into(),
        eval_file: EVAL_FILE.into(),
        train_users: train.len(),
        train_tokens: token_count(&train),
        eval_tokens: token_count(&eval),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest).at(&path)? + "\n").at(&path)?;
    Ok(manifest)
}

pub struct LoadedDataset {
    pub manifest: Manifest,
    pub train: Vec<UserTokens>,
    pub eval: Vec<UserTokens>,
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_slice(&fs::read(&path).at(&path)?).at(&path)
}

/// Reads a dataset directory and checks it against its manifest.
pub fn load_dir(dir: &Path) -> Result<LoadedDataset> {
    let manifest = load_manifest(dir)?;
    let resolve = |name: &str| -> PathBuf { dir.join(name) };
    let train = read_jsonl(&resolve(&manifest.train_file))?;
    let eval = read_jsonl(&resolve(&manifest.eval_file))?;
    if train.len() != manifest.train_users || token_count(&train) != manifest.train_tokens {
        return Err(DpfedError::Format {
            path: resolve(&manifest.train_file),
            message: "user or token count disagrees with the manifest".into(),
        });
    }
    if token_count(&eval) != manifest.eval_tokens {
        return Err(DpfedError::Format {
            path: resolve(&manifest.eval_file),
            message: "token count disagrees with the manifest".into(),
        });
    }
    Ok(LoadedDataset { manifest, train, eval })
}
