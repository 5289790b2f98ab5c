//! Run directories: one per configuration hash, holding every artifact the
//! commands produce plus a manifest of inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{read_json, write_json};

pub const RUN_ROOT_ENV: &str = "SIDRANK_RUN_ROOT";

/// Artifact file names inside a run directory.
pub mod files {
    pub const ITEMS: &str = "data/items.jsonl";
    pub const INTERACTIONS: &str = "data/interactions.jsonl";
    pub const PREFERENCES: &str = "data/preferences.json";
    pub const TRAIN: &str = "data/train_requests.jsonl";
    pub const TEST: &str = "data/test_requests.jsonl";
    pub const CODEBOOKS: &str = "tokenizer/codebooks.json";
    pub const SIDS: &str = "tokenizer/sids.jsonl";
    pub const PRETRAIN_CKPT: &str = "checkpoints/pretrain.json";
    pub const PRETRAIN_CURVE: &str = "curves/pretrain_loss.csv";
    pub const POSTTRAIN_CKPT: &str = "checkpoints/posttrain.json";
    pub const POSTTRAIN_CURVE: &str = "curves/posttrain_reward.csv";
    pub const DECODE: &str = "decode.jsonl";
    pub const EVAL: &str = "eval.csv";
    pub const EVAL_SUMMARY: &str = "eval_summary.json";
    pub const VARIANCE: &str = "variance.csv";
    pub const ABLATION: &str = "ablation.csv";
    pub const ABLATION_SUMMARY: &str = "ablation.json";
    pub const COLDSTART_SEEN: &str = "coldstart/eval_seen.csv";
    pub const COLDSTART_UNSEEN: &str = "coldstart/eval_unseen.csv";
    pub const COLDSTART_SUMMARY: &str = "coldstart/summary.json";
    pub const CONFIG: &str = "config.json";
    pub const MANIFEST: &str = "manifest.json";
}

/// What one command read and wrote.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    /// Input path (relative to the run directory) to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Extra arguments that shaped the outputs.
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub commands: BTreeMap<String, CommandRecord>,
}

/// An open run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl Run {
    /// Open the run directory for `config` under `root`, creating
    /// `<hash16>-<unix seconds>` if no directory for this hash exists yet.
    pub fn open(root: &Path, config: ExperimentConfig) -> CliResult<Self> {
        let hash = config.hash();
        let prefix = format!("{}-", &hash[..16]);
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let mut existing: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| CliError::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
            .map(|e| e.path())
            .collect();
        existing.sort();
        let dir = match existing.pop() {
            Some(d) => d,
            None => {
                let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
                let d = root.join(format!("{prefix}{ts}"));
                fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
                d
            }
        };
        let manifest_path = dir.join(files::MANIFEST);
        let manifest = if manifest_path.exists() {
            read_json(&manifest_path)?
        } else {
            Manifest { config_hash: hash, config: config.clone(), commands: BTreeMap::new() }
        };
        let run = Self { dir, config, manifest };
        if !run.path(files::CONFIG).exists() {
            write_json(&run.path(files::CONFIG), &run.config)?;
        }
        run.save_manifest()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// The input at `rel`, or an error naming the command that makes it.
    pub fn require(&self, rel: &str, producer: &'static str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingInput { path: p, producer })
        }
    }

    /// True when `command` already ran with `args` and all of `outputs`
    /// exist.
    pub fn is_done(&self, command: &str, outputs: &[&str], args: &[String]) -> bool {
        self.manifest.commands.get(command).is_some_and(|c| c.args == args)
            && outputs.iter().all(|o| self.path(o).exists())
    }

    /// Record a finished command with the hashes of what it read and wrote.
    pub fn record(&mut self, command: &str, inputs: &[&str], outputs: &[&str], args: Vec<String>) -> CliResult<()> {
        let hash_all = |list: &[&str]| -> CliResult<BTreeMap<String, String>> {
            list.iter().map(|rel| Ok((rel.to_string(), sha256_file(&self.path(rel))?))).collect()
        };
        let record = CommandRecord { inputs: hash_all(inputs)?, outputs: hash_all(outputs)?, args };
        self.manifest.commands.insert(command.to_string(), record);
        self.save_manifest()
    }

    fn save_manifest(&self) -> CliResult<()> {
        write_json(&self.path(files::MANIFEST), &self.manifest)
    }
}
