//! Monte-Carlo measurement of the label-dependent output-row gradient under
//! random candidate permutations, for local-index and global-identifier
//! labels.
//!
//! For a fixed step and target item, a local head trains row `j` with
//! `g_j = -1[pos(r*) = j] · h`, while a global head always trains the row of
//! the target's identifier with `g = -h`. Conditioning on the indicator
//! splits the sample variance of `g` exactly into a within-event part and a
//! mapping-induced part.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::RerankRequest;
use crate::error::{bail, Result};
use crate::math;
use crate::model::{serialize_input, Head, InputSequence, ModelConfig, PositionalMode, RerankerModel};
use crate::rng;
use crate::tokenizer::{SemanticId, SidTable, TokenVocabulary};
use crate::{ItemId, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    Local,
    Global,
}

impl Labeling {
    pub fn name(self) -> &'static str {
        match self {
            Labeling::Local => "local",
            Labeling::Global => "global",
        }
    }
}

/// One sampled permutation and the decoder state it produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    /// 1-based decoding step.
    pub step: usize,
    pub target: ItemId,
    /// `permutation[p]` is the original index of the candidate shown at `p`.
    pub permutation: Vec<usize>,
    pub hidden: Vec<f64>,
    /// 1-based position of the target in the permuted list.
    pub local_label: usize,
    pub global_label: ItemId,
}

impl GradientProbe {
    /// Label gradient on output row `row` (1-based) of a local head.
    pub fn local_gradient(&self, row: usize) -> Vec<f64> {
        if self.local_label == row {
            self.hidden.iter().map(|h| -h).collect()
        } else {
            vec![0.0; self.hidden.len()]
        }
    }

    /// Label gradient on the target's row of a global head.
    pub fn global_gradient(&self) -> Vec<f64> {
        self.hidden.iter().map(|h| -h).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub target: ItemId,
    /// Teacher-forced global-head tokens fed after BOS; empty means step 1.
    pub prefix: Vec<TokenId>,
    pub samples: usize,
    /// Rescale every hidden state to unit norm.
    pub unit_norm: bool,
    pub history_cap: usize,
    pub seed: u64,
}

/// Input for `request` with its candidates shown in `permutation` order.
pub fn probe_input(
    request: &RerankRequest,
    permutation: &[usize],
    table: &SidTable,
    vocab: &TokenVocabulary,
    history_cap: usize,
    max_enc_len: usize,
) -> Result<InputSequence> {
    serialize_input(&request.permuted(permutation), table, vocab, history_cap, max_enc_len)
}

/// `samples` i.i.d. uniform permutations of the candidate block, each with
/// the final decoder hidden state at step `prefix.len() + 1`.
pub fn sample_probes(
    model: &RerankerModel,
    request: &RerankRequest,
    table: &SidTable,
    vocab: &TokenVocabulary,
    spec: &ProbeSpec,
) -> Result<Vec<GradientProbe>> {
    let Some(origin) = request.candidates.iter().position(|&c| c == spec.target) else {
        bail!(Argument, "target {} is not a candidate of request {}", spec.target, request.request_id);
    };
    if spec.samples == 0 {
        bail!(Argument, "at least one probe is required");
    }
    let step = spec.prefix.len() + 1;
    if step > model.config().max_dec_len {
        bail!(Argument, "step {step} is beyond max_dec_len {}", model.config().max_dec_len);
    }
    let mut r = rng::seeded(spec.seed);
    let n = request.candidates.len();
    let mut probes = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let input = probe_input(request, &perm, table, vocab, spec.history_cap, model.config().max_enc_len)?;
        let enc = model.encode(&input)?;
        let mut state = model.start_decoder();
        let mut step_out = model.decode_step(&enc, &mut state, Head::Global, model.start_input(Head::Global))?;
        for &tok in &spec.prefix {
            step_out = model.decode_step(&enc, &mut state, Head::Global, tok)?;
        }
        let mut hidden = step_out.hidden;
        if spec.unit_norm {
            let norm = math::sqrt(hidden.iter().map(|h| h * h).sum());
            if norm > 0.0 {
                hidden.iter_mut().for_each(|h| *h /= norm);
            }
        }
        let local_label = 1 + perm.iter().position(|&p| p == origin).expect("permutation covers every index");
        probes.push(GradientProbe {
            step,
            target: spec.target,
            permutation: perm,
            hidden,
            local_label,
            global_label: spec.target,
        });
    }
    Ok(probes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub labeling: Labeling,
    /// 1-based output row, for local labels.
    pub row: Option<usize>,
    pub samples: usize,
    pub n_candidates: usize,
    pub mean: Vec<f64>,
    /// Unbiased sample variance: squared Frobenius deviation from the mean,
    /// divided by `S - 1`.
    pub total: f64,
    pub within: f64,
    pub mapping: f64,
    /// Fraction of probes whose label lands on the row.
    pub hit_rate: f64,
    /// Mean hidden state over the probes that hit the row.
    pub mu: Vec<f64>,
    pub mu_norm_sq: f64,
    /// `(1/N)(1 - 1/N) ‖mu‖²`; zero for global labels.
    pub bound: f64,
    /// Standard error of `total`.
    pub se: f64,
}

/// Mean computed as an offset from the first row, so identical rows give
/// that row back exactly.
fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> (Vec<f64>, usize) {
    let mut rows = rows.peekable();
    let Some(&pivot) = rows.peek() else {
        return (vec![0.0; dim], 0);
    };
    let mut offset = vec![0.0; dim];
    let mut count = 0;
    for r in rows {
        offset.iter_mut().zip(r.iter().zip(pivot)).for_each(|(a, (x, p))| *a += x - p);
        count += 1;
    }
    let m = pivot.iter().zip(&offset).map(|(p, o)| p + o / count as f64).collect();
    (m, count)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sample variance of the chosen label gradient, split by conditioning on
/// whether the label lands on the measured row. For global labels the row
/// never changes, so the whole variance is within-event.
pub fn estimate_variance(probes: &[GradientProbe], labeling: Labeling, row: Option<usize>) -> Result<VarianceEstimate> {
    let Some(first) = probes.first() else {
        bail!(Argument, "no probes to estimate from");
    };
    let n = first.permutation.len();
    let dim = first.hidden.len();
    if probes.iter().any(|p| p.permutation.len() != n || p.hidden.len() != dim) {
        bail!(Argument, "probes disagree on candidate count or hidden size");
    }
    let row = match (labeling, row) {
        (Labeling::Local, None) => bail!(Argument, "local labeling needs an output row"),
        (Labeling::Local, Some(j)) if j == 0 || j > n => bail!(Argument, "row {j} is outside 1..={n}"),
        (_, r) => r,
    };
    let hits: Vec<bool> = probes
        .iter()
        .map(|p| match labeling {
            Labeling::Local => Some(p.local_label) == row,
            Labeling::Global => true,
        })
        .collect();
    let grads: Vec<Vec<f64>> = probes
        .iter()
        .map(|p| match labeling {
            Labeling::Local => p.local_gradient(row.expect("checked above")),
            Labeling::Global => p.global_gradient(),
        })
        .collect();
    let s = probes.len();
    let (mean, _) = mean_of(grads.iter(), dim);
    let (mean_on, n_on) = mean_of(grads.iter().zip(&hits).filter(|(_, &h)| h).map(|(g, _)| g), dim);
    let (mean_off, n_off) = mean_of(grads.iter().zip(&hits).filter(|(_, &h)| !h).map(|(g, _)| g), dim);
    let (mu, _) = mean_of(probes.iter().zip(&hits).filter(|(_, &h)| h).map(|(p, _)| &p.hidden), dim);
    let mu_norm_sq: f64 = mu.iter().map(|m| m * m).sum();
    let bound = match labeling {
        Labeling::Local => {
            let p = 1.0 / n as f64;
            p * (1.0 - p) * mu_norm_sq
        }
        Labeling::Global => 0.0,
    };
    let hit_rate = n_on as f64 / s as f64;
    if s == 1 {
        return Ok(VarianceEstimate {
            labeling,
            row,
            samples: 1,
            n_candidates: n,
            mean,
            total: 0.0,
            within: 0.0,
            mapping: 0.0,
            hit_rate,
            mu,
            mu_norm_sq,
            bound,
            se: 0.0,
        });
    }
    let scale = 1.0 / (s - 1) as f64;
    let dev: Vec<f64> = grads.iter().map(|g| sq_dist(g, &mean) * s as f64 * scale).collect();
    let within_ss: f64 = grads
        .iter()
        .zip(&hits)
        .map(|(g, &h)| sq_dist(g, if h { &mean_on } else { &mean_off }))
        .sum();
    let between_ss = n_on as f64 * sq_dist(&mean_on, &mean) + n_off as f64 * sq_dist(&mean_off, &mean);
    let total = math::mean(&dev);
    let se = math::std_dev(&dev) / math::sqrt(s as f64);
    Ok(VarianceEstimate {
        labeling,
        row,
        samples: s,
        n_candidates: n,
        mean,
        total,
        within: within_ss * scale,
        mapping: between_ss * scale,
        hit_rate,
        mu,
        mu_norm_sq,
        bound,
        se,
    })
}

/// One line of the variance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    pub mode: PositionalMode,
    pub labeling: Labeling,
    pub row: Option<usize>,
    pub samples: usize,
    pub total_var: f64,
    pub mapping_var: f64,
    pub within_var: f64,
    pub bound: f64,
    pub se: f64,
    /// `total_var >= bound - 3·se`.
    pub bound_ok: bool,
}

impl VarianceRow {
    pub fn of(mode: PositionalMode, est: &VarianceEstimate) -> Self {
        Self {
            n: est.n_candidates,
            mode,
            labeling: est.labeling,
            row: est.row,
            samples: est.samples,
            total_var: est.total,
            mapping_var: est.mapping,
            within_var: est.within,
            bound: est.bound,
            se: est.se,
            bound_ok: est.total >= est.bound - 3.0 * est.se,
        }
    }
}

/// Self-contained probe setting: `n` candidates `0..n`, a short history, a
/// depth-2 SID table over a codebook of 8, and a randomly initialized model.
#[derive(Debug, Clone)]
pub struct VarianceLab {
    pub table: SidTable,
    pub vocab: TokenVocabulary,
    pub request: RerankRequest,
    pub model: RerankerModel,
    pub history_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub history: usize,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self { d_model: 16, n_heads: 2, layers: 1, history: 4, seed: 5 }
    }
}

impl VarianceLab {
    pub fn new(n: usize, mode: PositionalMode, config: &LabConfig) -> Result<Self> {
        let items = n + config.history;
        if n == 0 || items > 64 {
            bail!(Argument, "lab supports 1..={} candidates, got {n}", 64 - config.history);
        }
        let table = SidTable::from_entries(
            2,
            8,
            (0..items).map(|i| (i as ItemId, SemanticId { codes: vec![i / 8, i % 8], disamb: 0 })),
        )?;
        let vocab = TokenVocabulary::for_table(&table);
        let candidates: Vec<ItemId> = (0..n as ItemId).collect();
        let request = RerankRequest {
            request_id: 0,
            user_id: 0,
            window: 0,
            history: (n..items).map(|i| i as ItemId).collect(),
            relevance: candidates.iter().map(|&c| (c, c == 0)).collect(),
            candidates,
        };
        let model_config = ModelConfig {
            d_model: config.d_model,
            n_heads: config.n_heads,
            n_enc_layers: config.layers,
            n_dec_layers: config.layers,
            d_ff: 2 * config.d_model,
            vocab_size: vocab.size(),
            max_enc_len: 3 * items + 3,
            max_dec_len: 8,
            dropout: 0.0,
            positional: mode,
            item_token_len: vocab.item_token_len(),
            tie_output: false,
            local_slots: None,
        };
        let model = RerankerModel::new(model_config, config.seed)?;
        Ok(Self { table, vocab, request, model, history_cap: config.history })
    }

    pub fn probes(&self, target: ItemId, samples: usize, unit_norm: bool, seed: u64) -> Result<Vec<GradientProbe>> {
        let spec =
            ProbeSpec { target, prefix: Vec::new(), samples, unit_norm, history_cap: self.history_cap, seed };
        sample_probes(&self.model, &self.request, &self.table, &self.vocab, &spec)
    }

    pub fn input_for(&self, permutation: &[usize]) -> Result<InputSequence> {
        probe_input(
            &self.request,
            permutation,
            &self.table,
            &self.vocab,
            self.history_cap,
            self.model.config().max_enc_len,
        )
    }
}

/// Largest deviation between the autodiff gradient of the one-step
/// cross-entropy with respect to the global output matrix and the closed
/// form `(softmax(z) - e_y) hᵀ`.
pub fn output_gradient_deviation(model: &RerankerModel, input: &InputSequence, target: TokenId) -> Result<f64> {
    let step = model.forward(input, &[])?.remove(0);
    let lse = math::log_sum_exp(&step.logits, None, 1.0);
    let (_, grads) = model.loss_and_grads(input, Head::Global, &[target])?;
    let g = grads.get(model.output_head());
    let mut worst: f64 = 0.0;
    for (j, z) in step.logits.iter().enumerate() {
        let coeff = math::exp(z - lse) - if j == target { 1.0 } else { 0.0 };
        for (k, h) in step.hidden.iter().enumerate() {
            worst = worst.max((g.get(j, k) - coeff * h).abs());
        }
    }
    Ok(worst)
}

/// CSV header matching [`VarianceRow`].
pub fn report_header() -> String {
    String::from("n,mode,labeling,row,samples,total_var,mapping_var,within_var,bound,se,bound_ok")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_probes(n: usize, s: usize, seed: u64) -> Vec<GradientProbe> {
        let mut r = rng::seeded(seed);
        (0..s)
            .map(|_| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut r);
                let local_label = 1 + perm.iter().position(|&p| p == 0).unwrap();
                GradientProbe {
                    step: 1,
                    target: 0,
                    permutation: perm,
                    hidden: vec![0.6, 0.8],
                    local_label,
                    global_label: 0,
                }
            })
            .collect()
    }

    #[test]
    fn constant_hidden_gives_the_closed_form() {
        let probes = constant_probes(4, 20_000, 1);
        let local = estimate_variance(&probes, Labeling::Local, Some(2)).unwrap();
        assert!((local.total - 0.1875).abs() < 3.0 * local.se, "{local:?}");
        assert!(local.within.abs() < 1e-12);
        assert!((local.mu_norm_sq - 1.0).abs() < 1e-12);
        assert!((local.bound - 0.1875).abs() < 1e-12);
        let global = estimate_variance(&probes, Labeling::Global, None).unwrap();
        assert_eq!(global.total, 0.0);
        assert_eq!(global.mapping, 0.0);
    }

    #[test]
    fn decomposition_is_exact_on_the_sample() {
        let mut probes = constant_probes(5, 500, 2);
        let mut r = rng::seeded(3);
        for p in &mut probes {
            p.hidden = (0..3).map(|_| rng::normal(&mut r)).collect();
        }
        for row in 1..=5 {
            let e = estimate_variance(&probes, Labeling::Local, Some(row)).unwrap();
            assert!((e.total - e.within - e.mapping).abs() < 1e-10);
        }
        let e = estimate_variance(&probes, Labeling::Global, None).unwrap();
        assert!((e.total - e.within).abs() < 1e-10);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let probes = constant_probes(4, 1, 0);
        let e = estimate_variance(&probes, Labeling::Local, Some(1)).unwrap();
        assert_eq!((e.total, e.se), (0.0, 0.0));
        assert!(estimate_variance(&probes, Labeling::Local, None).is_err());
        assert!(estimate_variance(&probes, Labeling::Local, Some(5)).is_err());
        assert!(estimate_variance(&[], Labeling::Global, None).is_err());
    }

    #[test]
    fn lab_rejects_foreign_targets_and_late_steps() {
        let lab = VarianceLab::new(4, PositionalMode::SetLike, &LabConfig::default()).unwrap();
        assert!(lab.probes(99, 3, false, 0).is_err());
        let spec = ProbeSpec { target: 0, prefix: vec![0; 8], samples: 1, unit_norm: false, history_cap: 4, seed: 0 };
        assert!(sample_probes(&lab.model, &lab.request, &lab.table, &lab.vocab, &spec).is_err());
    }
}
