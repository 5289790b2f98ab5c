//! Experiment configuration: one JSON document, dotted-path overrides, and
//! whole-document validation.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use sidrank_core::corpus::{RequestSpec, SyntheticSpec};
use sidrank_core::eval::{ClickModel, RewardSpec};
use sidrank_core::model::{Head, ModelConfig, PositionalMode};
use sidrank_core::optim::AdamWConfig;
use sidrank_core::training::{GrpoConfig, PretrainConfig, ProxyScorer, TargetSpec};
use sidrank_core::variance::{LabConfig, Labeling};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Recorded in manifests. Every stage is single-threaded with a fixed
    /// reduction order, so results are reproducible either way.
    pub deterministic: bool,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub posttrain: PosttrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub coldstart: ColdStartSection,
    pub variance: VarianceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            deterministic: true,
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            posttrain: PosttrainSection::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            coldstart: ColdStartSection::default(),
            variance: VarianceSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Items JSONL to ingest instead of generating a synthetic corpus.
    pub items_path: Option<String>,
    pub interactions_path: Option<String>,
    pub synthetic: SyntheticSpec,
    pub requests: RequestSpec,
    /// Trailing windows per user held out for evaluation.
    pub holdout_windows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            items_path: None,
            interactions_path: None,
            synthetic: SyntheticSpec::default(),
            requests: RequestSpec::default(),
            holdout_windows: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { levels: 3, codebook_size: 16, iters: 50, seed: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub positional: PositionalMode,
    pub tie_output: bool,
    pub history_cap: usize,
    pub init_seed: u64,
    /// Output head the pipeline commands train and decode with.
    pub head: Head,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 64,
            dropout: 0.0,
            positional: PositionalMode::Absolute,
            tie_output: false,
            history_cap: 5,
            init_seed: 1,
            head: Head::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Sampled permutations per request (L).
    pub samples: usize,
    pub scorer: ProxyScorer,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs of the capacity check that fits a small training subset.
    pub memorize_epochs: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            samples: 20,
            scorer: ProxyScorer::OracleReward,
            epochs: 8,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.01,
            seed: 17,
            memorize_epochs: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosttrainSection {
    pub group_size: usize,
    pub temperature: f64,
    pub beta: f64,
    pub clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PosttrainSection {
    fn default() -> Self {
        Self {
            group_size: 20,
            temperature: 1.0,
            beta: 0.0,
            clip: 0.2,
            steps: 150,
            batch_size: 4,
            lr: 5e-6,
            weight_decay: 0.01,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { beam: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub reward: RewardSpec,
    pub click: ClickModel,
    /// Training requests whose targets the capacity check must reproduce.
    pub accuracy_subset: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { reward: RewardSpec::default(), click: ClickModel::default(), accuracy_subset: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColdStartSection {
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for ColdStartSection {
    fn default() -> Self {
        Self { mask_fraction: 0.05, seed: 29 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSection {
    pub n: Vec<usize>,
    pub samples: usize,
    pub modes: Vec<PositionalMode>,
    pub labelings: Vec<Labeling>,
    /// 1-based rows measured under local labels; empty means `{1, N}`.
    pub rows: Vec<usize>,
    /// Rescale hidden states to unit norm.
    pub unit_norm: bool,
    pub lab: LabConfig,
    pub seed: u64,
}

impl Default for VarianceSection {
    fn default() -> Self {
        Self {
            n: vec![4, 8, 16],
            samples: 20_000,
            modes: vec![PositionalMode::SetLike, PositionalMode::Absolute],
            labelings: vec![Labeling::Local, Labeling::Global],
            rows: Vec::new(),
            unit_norm: false,
            lab: LabConfig::default(),
            seed: 31,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("config: {e}")]))
    }

    /// Apply `path.to.key=value` overrides. Values parse as JSON and fall
    /// back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> CliResult<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let mut problems = Vec::new();
        for o in overrides {
            let Some((path, raw)) = o.split_once('=') else {
                problems.push(format!("override `{o}` is not of the form key=value"));
                continue;
            };
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            if let Err(e) = set_path(&mut doc, path, value) {
                problems.push(e);
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(vec![format!("after overrides: {e}")]))
    }

    /// Every semantic problem, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let r = &self.data.requests;
        need(self.data.items_path.is_some() == self.data.interactions_path.is_some(),
            "data.items_path and data.interactions_path must be given together".into());
        if let Err(e) = self.data.synthetic.validate() {
            need(false, format!("data.synthetic: {e}"));
        }
        need(r.list_len >= 1 && r.n_candidates >= r.list_len, format!(
            "data.requests needs 1 <= list_len <= n_candidates (got K={}, N={})", r.list_len, r.n_candidates));
        need(r.window_size >= 1, "data.requests.window_size must be at least 1".into());
        need(self.data.holdout_windows >= 1 && self.data.holdout_windows < r.windows, format!(
            "data.holdout_windows must lie in [1, windows) (got {} of {})", self.data.holdout_windows, r.windows));
        let t = &self.tokenizer;
        need(t.levels >= 1, "tokenizer.levels must be at least 1".into());
        need(t.codebook_size >= 1, "tokenizer.codebook_size must be at least 1".into());
        need(t.iters >= 1, "tokenizer.iters must be at least 1".into());
        let m = &self.model;
        need(m.history_cap <= 1000, "model.history_cap is implausibly large".into());
        for p in self.model_config(t.levels + 1, 16, None).violations() {
            v.push(format!("model: {p}"));
        }
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let p = &self.pretrain;
        need(p.samples >= 1, "pretrain.samples must be at least 1".into());
        need(p.batch_size >= 1, "pretrain.batch_size must be at least 1".into());
        need(p.lr > 0.0 && p.lr.is_finite(), "pretrain.lr must be positive".into());
        need(p.weight_decay >= 0.0, "pretrain.weight_decay must be non-negative".into());
        let g = &self.posttrain;
        need(g.group_size >= 2, "posttrain.group_size must be at least 2".into());
        need(g.temperature > 0.0, "posttrain.temperature must be positive".into());
        need(g.beta >= 0.0, "posttrain.beta must be non-negative".into());
        need(g.clip >= 0.0, "posttrain.clip must be non-negative".into());
        need(g.batch_size >= 1, "posttrain.batch_size must be at least 1".into());
        need(g.lr > 0.0 && g.lr.is_finite(), "posttrain.lr must be positive".into());
        need(self.decode.beam >= 1, "decode.beam must be at least 1".into());
        need(self.eval.accuracy_subset >= 1, "eval.accuracy_subset must be at least 1".into());
        need((0.0..=1.0).contains(&self.coldstart.mask_fraction), "coldstart.mask_fraction must lie in [0, 1]".into());
        let vs = &self.variance;
        need(vs.samples >= 1, "variance.samples must be at least 1".into());
        need(vs.n.iter().all(|&n| n >= 1 && n + vs.lab.history <= 64),
            format!("variance.n entries must lie in 1..={}", 64usize.saturating_sub(vs.lab.history)));
        need(vs.lab.n_heads >= 1 && vs.lab.d_model % vs.lab.n_heads.max(1) == 0,
            "variance.lab.d_model must be divisible by n_heads".into());
        v
    }

    pub fn validated(self) -> CliResult<Self> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(CliError::Config(v))
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn k(&self) -> usize {
        self.data.requests.list_len
    }

    /// Model configuration for items of `item_token_len` tokens over a
    /// vocabulary of `vocab_size`.
    pub fn model_config(&self, item_token_len: usize, vocab_size: usize, local_slots: Option<usize>) -> ModelConfig {
        let m = &self.model;
        let n = self.data.requests.n_candidates;
        ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_ff: m.d_ff,
            vocab_size,
            max_enc_len: (n + m.history_cap) * item_token_len + 3,
            max_dec_len: self.k() * item_token_len,
            dropout: m.dropout,
            positional: m.positional,
            item_token_len,
            tie_output: m.tie_output,
            local_slots,
        }
    }

    pub fn target_spec(&self) -> TargetSpec {
        TargetSpec {
            samples: self.pretrain.samples,
            scorer: self.pretrain.scorer,
            k: self.k(),
            seed: self.pretrain.seed ^ 0x7A,
            ..TargetSpec::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            optimizer: AdamWConfig { lr: p.lr, weight_decay: p.weight_decay, ..AdamWConfig::default() },
            seed: p.seed,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        let g = &self.posttrain;
        GrpoConfig {
            group_size: g.group_size,
            temperature: g.temperature,
            clip: g.clip,
            beta: g.beta,
            batch_size: g.batch_size,
            k: self.k(),
            optimizer: AdamWConfig { lr: g.lr, weight_decay: g.weight_decay, ..AdamWConfig::default() },
            seed: g.seed,
            ..GrpoConfig::default()
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(format!("`{}` is not a section", keys[..i].join(".")));
        };
        let Some(child) = map.get_mut(*key) else {
            return Err(format!("unknown config key `{}`", keys[..=i].join(".")));
        };
        if i + 1 == keys.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(format!("empty override path `{path}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c = ExperimentConfig::default()
            .with_overrides(&["posttrain.group_size=8".into(), "model.positional=set_like".into()])
            .unwrap();
        assert_eq!(c.posttrain.group_size, 8);
        assert_eq!(c.model.positional, PositionalMode::SetLike);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::default().with_overrides(&["posttrain.groups=8".into(), "nope=1".into()]);
        match err {
            Err(CliError::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "extra": 2}"#).is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let c = ExperimentConfig::default()
            .with_overrides(&[
                "posttrain.group_size=1".into(),
                "decode.beam=0".into(),
                "model.n_heads=5".into(),
                "data.requests.list_len=60".into(),
            ])
            .unwrap();
        let v = c.violations();
        assert_eq!(v.len(), 4, "{v:?}");
        assert!(ExperimentConfig::default().violations().is_empty());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["seed=8".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }
}
