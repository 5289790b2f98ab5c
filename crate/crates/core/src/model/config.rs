use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// How candidate tokens are position-encoded in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Every encoder token gets its absolute sequence position, so the
    /// encoder sees the candidate order.
    Absolute,
    /// Candidate tokens only get their offset inside their item; the encoder
    /// treats the candidate block as an unordered set.
    SetLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Input/output token vocabulary, specials included.
    pub vocab_size: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub dropout: f64,
    pub positional: PositionalMode,
    /// Tokens per item; needed by set-like positions.
    pub item_token_len: usize,
    /// Share the token embedding with the output projection.
    pub tie_output: bool,
    /// Width of the local-index head (candidate slots); `None` disables it.
    pub local_slots: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            vocab_size: 4 * 256 + 4,
            max_enc_len: 512,
            max_dec_len: 32,
            dropout: 0.0,
            positional: PositionalMode::Absolute,
            item_token_len: 4,
            tie_output: false,
            local_slots: None,
        }
    }
}

impl ModelConfig {
    /// All violations, empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                v.push(String::from(msg));
            }
        };
        need(self.d_model > 0, "d_model must be positive");
        need(self.n_heads > 0, "n_heads must be positive");
        need(self.n_heads == 0 || self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads");
        need(self.d_ff > 0, "d_ff must be positive");
        need(self.vocab_size > 0, "vocab_size must be positive");
        need(self.max_enc_len > 0 && self.max_dec_len > 0, "max lengths must be positive");
        need((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        need(self.item_token_len > 0, "item_token_len must be positive");
        need(self.local_slots != Some(0), "local_slots must be positive when set");
        v
    }
}
