//! Trie-constrained beam search and sampling.
//!
//! At every step only tokens returned by [`CandidateTrie::legal_tokens`] for
//! the hypothesis' own pruning state are scored; log-probabilities are taken
//! from the softmax renormalized over that legal set. Completed items are
//! pruned from the hypothesis' state so no list can repeat an item.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::{RankedList, RerankRequest};
use crate::error::{bail, Result};
use crate::math;
use crate::model::{serialize_input, DecoderState, EncodedInput, Head, InputSequence, RerankerModel, StepDistribution};
use crate::rng;
use crate::tokenizer::{SidTable, TokenVocabulary};
use crate::trie::{CandidateTrie, TrieCursor, TrieState};
use crate::ItemId;

/// Encoder input and candidate trie for one request under one head.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: InputSequence,
    pub trie: CandidateTrie,
}

/// Serialize `request` and build the trie matching `head`: semantic-ID
/// strings for the global head, single position tokens for the local head.
pub fn prepare(
    head: Head,
    request: &RerankRequest,
    table: &SidTable,
    vocab: &TokenVocabulary,
    history_cap: usize,
    max_enc_len: usize,
) -> Result<Prepared> {
    let input = serialize_input(request, table, vocab, history_cap, max_enc_len)?;
    let trie = match head {
        Head::Global => CandidateTrie::from_candidates(&request.candidates, table, vocab)?,
        Head::Local => CandidateTrie::over_positions(&request.candidates)?,
    };
    Ok(Prepared { input, trie })
}

/// A request ready for decoding: the encoder has run once and its output is
/// shared by every hypothesis or rollout.
pub struct DecodeTask<'a> {
    model: &'a RerankerModel,
    head: Head,
    trie: &'a CandidateTrie,
    request: &'a RerankRequest,
    enc: EncodedInput,
    k: usize,
}

/// A generated list with its token trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub list: RankedList,
    /// Head outputs in generation order (tokens, or positions for the local
    /// head).
    pub tokens: Vec<usize>,
    /// Per-step log-probability of the chosen output under the
    /// legal-set-renormalized distribution used to pick it.
    pub step_logprobs: Vec<f64>,
    /// Legal output set at every step.
    pub legal: Vec<Vec<usize>>,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    /// Draw from the tempered, masked softmax.
    Temperature(f64),
    /// Arg-max at every step (ties to the smallest output id).
    Greedy,
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    step_logprobs: Vec<f64>,
    legal: Vec<Vec<usize>>,
    logprob: f64,
    cursor: TrieCursor,
    state: TrieState,
    items: Vec<ItemId>,
    decoder: DecoderState,
    next: StepDistribution,
}

/// `log softmax(z / τ)` restricted to `legal`, in the order of `legal`.
fn masked_log_probs(logits: &[f64], legal: &[usize], temperature: f64) -> Vec<f64> {
    let lse = math::log_sum_exp(logits, Some(legal), temperature);
    legal.iter().map(|&t| logits[t] / temperature - lse).collect()
}

impl<'a> DecodeTask<'a> {
    pub fn new(
        model: &'a RerankerModel,
        head: Head,
        prepared: &'a Prepared,
        request: &'a RerankRequest,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            bail!(Argument, "list length K must be at least 1");
        }
        if k > prepared.trie.num_items() {
            bail!(Argument, "K = {k} exceeds the {} candidates of request {}", prepared.trie.num_items(), request.request_id);
        }
        let enc = model.encode(&prepared.input)?;
        Ok(Self { model, head, trie: &prepared.trie, request, enc, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Total output steps of a full list.
    pub fn steps(&self) -> usize {
        self.k * self.trie.item_token_len()
    }

    fn initial(&self) -> Result<Hypothesis> {
        let mut decoder = self.model.start_decoder();
        let next = self.model.decode_step(&self.enc, &mut decoder, self.head, self.model.start_input(self.head))?;
        Ok(Hypothesis {
            tokens: Vec::with_capacity(self.steps()),
            step_logprobs: Vec::with_capacity(self.steps()),
            legal: Vec::with_capacity(self.steps()),
            logprob: 0.0,
            cursor: self.trie.root(),
            state: self.trie.new_state(),
            items: Vec::with_capacity(self.k),
            decoder,
            next,
        })
    }

    /// Consume `token`, prune a completed item and, unless the list is done,
    /// run the decoder one step further.
    fn extend(&self, mut h: Hypothesis, legal: Vec<usize>, token: usize, logp: f64) -> Result<Hypothesis> {
        let (cursor, done) = self.trie.advance(&h.state, h.cursor, token)?;
        h.cursor = cursor;
        if let Some(item) = done {
            self.trie.prune(&mut h.state, item)?;
            h.items.push(item);
        }
        h.tokens.push(token);
        h.step_logprobs.push(logp);
        h.legal.push(legal);
        h.logprob += logp;
        if h.items.len() < self.k {
            h.next = self.model.decode_step(&self.enc, &mut h.decoder, self.head, self.model.feedback_input(self.head, token))?;
        }
        Ok(h)
    }

    fn finish(&self, h: Hypothesis) -> Result<Decoded> {
        let list = RankedList::new(h.items, self.request)?;
        if list.len() != self.k {
            bail!(State, "decoded list has {} items, expected {}", list.len(), self.k);
        }
        Ok(Decoded { list, tokens: h.tokens, step_logprobs: h.step_logprobs, legal: h.legal, logprob: h.logprob })
    }

    /// Token-level beam search keeping at most `beam` hypotheses after each
    /// step. Results are ordered by total log-probability, ties broken by
    /// the lexicographically smaller token sequence.
    pub fn beam_search(&self, beam: usize) -> Result<Vec<Decoded>> {
        if beam == 0 {
            bail!(Argument, "beam size must be at least 1");
        }
        let mut hyps = alloc::vec![self.initial()?];
        for _ in 0..self.steps() {
            let mut expansions: Vec<(usize, usize, f64, f64)> = Vec::new();
            let mut legal_sets = Vec::with_capacity(hyps.len());
            for (hi, h) in hyps.iter().enumerate() {
                let legal = self.trie.legal_tokens(&h.state, h.cursor)?;
                for (&t, lp) in legal.iter().zip(masked_log_probs(&h.next.logits, &legal, 1.0)) {
                    expansions.push((hi, t, lp, h.logprob + lp));
                }
                legal_sets.push(legal);
            }
            expansions.sort_by(|a, b| {
                b.3.partial_cmp(&a.3).unwrap_or(Ordering::Equal).then_with(|| {
                    hyps[a.0].tokens.cmp(&hyps[b.0].tokens).then(a.1.cmp(&b.1))
                })
            });
            expansions.truncate(beam);
            let mut next = Vec::with_capacity(expansions.len());
            for (hi, t, lp, _) in expansions {
                next.push(self.extend(hyps[hi].clone(), legal_sets[hi].clone(), t, lp)?);
            }
            hyps = next;
        }
        hyps.into_iter().map(|h| self.finish(h)).collect()
    }

    /// One constrained rollout. Log-probabilities are recorded under the
    /// distribution that was sampled from (the tempered one; `τ = 1` for
    /// greedy).
    pub fn sample(&self, mode: SampleMode, seed: u64) -> Result<Decoded> {
        let temperature = match mode {
            SampleMode::Temperature(t) if t > 0.0 && t.is_finite() => t,
            SampleMode::Temperature(t) => bail!(Argument, "sampling temperature must be positive, got {t}"),
            SampleMode::Greedy => 1.0,
        };
        let mut r = rng::seeded(seed);
        let mut h = self.initial()?;
        for _ in 0..self.steps() {
            let legal = self.trie.legal_tokens(&h.state, h.cursor)?;
            let lps = masked_log_probs(&h.next.logits, &legal, temperature);
            let pick = match mode {
                SampleMode::Greedy => {
                    let mut best = 0;
                    for (i, lp) in lps.iter().enumerate() {
                        if *lp > lps[best] {
                            best = i;
                        }
                    }
                    best
                }
                SampleMode::Temperature(_) => {
                    let u = rng::uniform(&mut r);
                    let mut acc = 0.0;
                    let mut pick = lps.len() - 1;
                    for (i, lp) in lps.iter().enumerate() {
                        acc += math::exp(*lp);
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            let (t, lp) = (legal[pick], lps[pick]);
            h = self.extend(h, legal, t, lp)?;
        }
        self.finish(h)
    }

    /// Greedy constrained decoding.
    pub fn greedy(&self) -> Result<Decoded> {
        self.sample(SampleMode::Greedy, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_log_probs_normalize_over_the_legal_set() {
        let z = [0.3, -1.0, 2.0, 0.7];
        for tau in [0.5, 1.0, 3.0] {
            let lp = masked_log_probs(&z, &[0, 2, 3], tau);
            let total: f64 = lp.iter().map(|v| math::exp(*v)).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(lp[1] > lp[2] && lp[2] > lp[0]);
        }
    }
}
