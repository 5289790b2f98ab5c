//! Encoder-decoder reranker over the global token vocabulary.
//!
//! Training paths build a [`Graph`] and differentiate it; inference runs an
//! incremental decoder ([`DecoderState`]) that caches self-attention keys and
//! values and reuses the encoder's cross-attention projections.

mod config;
pub mod graph;
mod input;
mod params;
mod transformer;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, PositionalMode};
pub use graph::{Graph, Var};
pub use input::{serialize_input, InputSequence, Segment};
pub use params::{Gradients, NamedTensor, ParamId, ParamStore};
pub use transformer::{DecoderState, EncodedInput};

use crate::error::{bail, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Matrix;

/// Which output head a decoder pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Logits over the token vocabulary.
    Global,
    /// Logits over candidate positions `0..N`.
    Local,
}

/// Output of one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct FfnIds {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct EncLayer {
    norm1: ParamId,
    attn: AttnIds,
    norm2: ParamId,
    ffn: FfnIds,
}

#[derive(Debug, Clone, PartialEq)]
struct DecLayer {
    norm1: ParamId,
    self_attn: AttnIds,
    norm2: ParamId,
    cross: AttnIds,
    norm3: ParamId,
    ffn: FfnIds,
}

#[derive(Debug, Clone, PartialEq)]
struct LocalIds {
    slot_emb: ParamId,
    head: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: ParamId,
    seg_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncLayer>,
    enc_norm: ParamId,
    dec: Vec<DecLayer>,
    dec_norm: ParamId,
    out_head: ParamId,
    local: Option<LocalIds>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: SeededRng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| std * rng::normal(rng));
        self.store.push(name, m)
    }

    fn ones(&mut self, name: String, d: usize) -> ParamId {
        self.store.push(name, Matrix::from_vec(1, d, vec![1.0; d]))
    }

    fn attn(&mut self, prefix: &str, d: usize, out_std: f64) -> AttnIds {
        let s = 1.0 / crate::math::sqrt(d as f64);
        AttnIds {
            wq: self.normal(format!("{prefix}.wq"), d, d, s),
            wk: self.normal(format!("{prefix}.wk"), d, d, s),
            wv: self.normal(format!("{prefix}.wv"), d, d, s),
            wo: self.normal(format!("{prefix}.wo"), d, d, out_std),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize, out_scale: f64) -> FfnIds {
        FfnIds {
            w1: self.normal(format!("{prefix}.w1"), d_ff, d, 1.0 / crate::math::sqrt(d as f64)),
            w2: self.normal(format!("{prefix}.w2"), d, d_ff, out_scale / crate::math::sqrt(d_ff as f64)),
        }
    }
}

const EMB_STD: f64 = 0.5;

fn build_layout(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Layout {
    let d = config.d_model;
    let mut b = Builder { store, rng: rng::seeded(seed) };
    let depth = (config.n_enc_layers + config.n_dec_layers).max(1) as f64;
    let res_scale = 1.0 / crate::math::sqrt(2.0 * depth);
    let res_std = res_scale / crate::math::sqrt(d as f64);

    let tok_emb = b.normal("tok_emb".into(), config.vocab_size, d, EMB_STD);
    let seg_emb = b.normal("seg_emb".into(), input::SEGMENT_KINDS, d, EMB_STD);
    let enc_pos = b.normal("enc_pos".into(), config.max_enc_len, d, EMB_STD);
    let dec_pos = b.normal("dec_pos".into(), config.max_dec_len, d, EMB_STD);
    let enc = (0..config.n_enc_layers)
        .map(|l| EncLayer {
            norm1: b.ones(format!("enc.{l}.norm1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d, res_std),
            norm2: b.ones(format!("enc.{l}.norm2"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.d_ff, res_scale),
        })
        .collect();
    let enc_norm = b.ones("enc_norm".into(), d);
    let dec = (0..config.n_dec_layers)
        .map(|l| DecLayer {
            norm1: b.ones(format!("dec.{l}.norm1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d, res_std),
            norm2: b.ones(format!("dec.{l}.norm2"), d),
            cross: b.attn(&format!("dec.{l}.cross"), d, res_std),
            norm3: b.ones(format!("dec.{l}.norm3"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.d_ff, res_scale),
        })
        .collect();
    let dec_norm = b.ones("dec_norm".into(), d);
    let out_std = 1.0 / crate::math::sqrt(d as f64);
    let out_head = if config.tie_output { tok_emb } else { b.normal("out_head".into(), config.vocab_size, d, out_std) };
    let local = config.local_slots.map(|n| LocalIds {
        slot_emb: b.normal("local.slot_emb".into(), n + 1, d, EMB_STD),
        head: b.normal("local.head".into(), n, d, out_std),
    });
    Layout { tok_emb, seg_emb, enc_pos, dec_pos, enc, enc_norm, dec, dec_norm, out_head, local }
}

/// Configuration plus parameters. Cheap to share read-only across decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankerModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    init_seed: u64,
}

impl RerankerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            bail!(Argument, "invalid model config: {}", problems.join("; "));
        }
        let mut params = ParamStore::default();
        let layout = build_layout(&config, &mut params, seed);
        Ok(Self { config, params, layout, init_seed: seed })
    }

    /// Reassemble a model from stored parameters; names and shapes must match
    /// what `config` lays out.
    pub fn from_parts(config: ModelConfig, params: ParamStore, init_seed: u64) -> Result<Self> {
        let fresh = Self::new(config, init_seed)?;
        if fresh.params.len() != params.len() {
            bail!(Integrity, "expected {} parameter tensors, found {}", fresh.params.len(), params.len());
        }
        for (want, got) in fresh.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                bail!(
                    Integrity,
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                );
            }
            if !got.value.is_finite() {
                bail!(Integrity, "parameter {} has non-finite entries", got.name);
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Parameter id of the global output projection (`vocab × d_model`).
    pub fn output_head(&self) -> ParamId {
        self.layout.out_head
    }

    /// Parameter id of the local-index projection (`N × d_model`), if any.
    pub fn local_head(&self) -> Option<ParamId> {
        self.layout.local.as_ref().map(|l| l.head)
    }

    pub fn head_param(&self, head: Head) -> Result<ParamId> {
        match head {
            Head::Global => Ok(self.layout.out_head),
            Head::Local => self.local_head().ok_or_else(|| crate::Error::Argument("model has no local head".into())),
        }
    }

    /// Width of a head's output.
    pub fn head_width(&self, head: Head) -> usize {
        match head {
            Head::Global => self.config.vocab_size,
            Head::Local => self.config.local_slots.unwrap_or(0),
        }
    }

    /// Decoder input id that starts generation.
    pub fn start_input(&self, head: Head) -> usize {
        match head {
            Head::Global => self.config.vocab_size - 3,
            Head::Local => 0,
        }
    }

    /// Decoder input id that feeds back an emitted output id.
    pub fn feedback_input(&self, head: Head, output: usize) -> usize {
        match head {
            Head::Global => output,
            Head::Local => output + 1,
        }
    }

    /// Teacher-forced decoder inputs for `targets`.
    pub fn decoder_inputs(&self, head: Head, targets: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(targets.len().max(1));
        out.push(self.start_input(head));
        out.extend(targets.iter().take(targets.len().saturating_sub(1)).map(|&t| self.feedback_input(head, t)));
        out
    }

    /// Graph over this model's parameters; dropout is active only when a
    /// seed is given and the config enables it.
    pub fn graph(&self, dropout_seed: Option<u64>) -> Graph<'_> {
        let g = Graph::new(&self.params);
        match dropout_seed {
            Some(seed) => g.with_dropout(self.config.dropout, seed),
            None => g,
        }
    }
}
