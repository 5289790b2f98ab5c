use alloc::vec::Vec;

use super::graph::{attention_forward, rms_norm_rows, Graph, Var};
use super::input::{InputSequence, Segment};
use super::{AttnIds, FfnIds, Gradients, Head, PositionalMode, RerankerModel, StepDistribution};
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Matrix;

/// Encoder output prepared for incremental decoding: per decoder layer, the
/// cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    cross: Vec<(Matrix, Matrix)>,
    pub n_candidates: usize,
}

/// Self-attention cache of one decoding hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    len: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl DecoderState {
    /// Number of inputs consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn push_row(m: &mut Matrix, row: &[f64]) {
    debug_assert_eq!(m.cols, row.len());
    m.data.extend_from_slice(row);
    m.rows += 1;
}

impl RerankerModel {
    fn check_input(&self, input: &InputSequence) -> Result<()> {
        if input.tokens.len() > self.config.max_enc_len {
            bail!(Length, "input of {} tokens exceeds max_enc_len {}", input.tokens.len(), self.config.max_enc_len);
        }
        if input.tokens.is_empty() {
            bail!(Argument, "empty encoder input");
        }
        if let Some(t) = input.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            bail!(Argument, "token {t} is outside the vocabulary of size {}", self.config.vocab_size);
        }
        Ok(())
    }

    fn check_decoder(&self, head: Head, inputs: &[usize], n_candidates: usize) -> Result<()> {
        if inputs.len() > self.config.max_dec_len {
            bail!(Length, "decoder length {} exceeds max_dec_len {}", inputs.len(), self.config.max_dec_len);
        }
        let bound = match head {
            Head::Global => self.config.vocab_size,
            Head::Local => {
                let Some(n) = self.config.local_slots else {
                    bail!(Argument, "model has no local head");
                };
                if n != n_candidates {
                    bail!(Argument, "local head has {n} slots but the request has {n_candidates} candidates");
                }
                n + 1
            }
        };
        if let Some(t) = inputs.iter().find(|&&t| t >= bound) {
            bail!(Argument, "decoder input {t} is out of range (< {bound})");
        }
        Ok(())
    }

    fn check_targets(&self, head: Head, targets: &[usize]) -> Result<()> {
        if targets.is_empty() {
            bail!(Argument, "empty target sequence");
        }
        let width = self.head_width(head);
        if let Some(t) = targets.iter().find(|&&t| t >= width) {
            bail!(Argument, "target {t} is outside the head of width {width}");
        }
        Ok(())
    }

    fn positions(&self, input: &InputSequence) -> Vec<usize> {
        input
            .segments
            .iter()
            .enumerate()
            .map(|(i, seg)| match (self.config.positional, seg) {
                (PositionalMode::SetLike, Segment::Candidate { offset, .. }) => *offset,
                _ => i,
            })
            .collect()
    }

    fn attention_block(&self, g: &mut Graph<'_>, ids: &AttnIds, x: Var, causal: bool) -> Var {
        let q = g.linear(x, ids.wq);
        let k = g.linear(x, ids.wk);
        let v = g.linear(x, ids.wv);
        let a = g.attention(q, k, v, self.config.n_heads, causal);
        let o = g.linear(a, ids.wo);
        g.dropout(o)
    }

    fn ffn_block(&self, g: &mut Graph<'_>, ids: &FfnIds, x: Var) -> Var {
        let h = g.linear(x, ids.w1);
        let h = g.gelu(h);
        let o = g.linear(h, ids.w2);
        g.dropout(o)
    }

    /// Encoder output rows (after the final norm).
    pub fn encode_graph(&self, g: &mut Graph<'_>, input: &InputSequence) -> Result<Var> {
        self.check_input(input)?;
        let l = &self.layout;
        let segs: Vec<usize> = input.segments.iter().map(|s| s.kind_id()).collect();
        let mut x = g.gather(l.tok_emb, &input.tokens);
        let p = g.gather(l.enc_pos, &self.positions(input));
        x = g.add(x, p);
        let s = g.gather(l.seg_emb, &segs);
        x = g.add(x, s);
        x = g.dropout(x);
        for layer in &l.enc {
            let n = g.rms_norm(x, layer.norm1);
            let a = self.attention_block(g, &layer.attn, n, false);
            x = g.add(x, a);
            let n = g.rms_norm(x, layer.norm2);
            let f = self.ffn_block(g, &layer.ffn, n);
            x = g.add(x, f);
        }
        Ok(g.rms_norm(x, l.enc_norm))
    }

    /// Cross-attention keys and values for every decoder layer. Several
    /// decoder passes may share them.
    pub fn cross_graph(&self, g: &mut Graph<'_>, enc: Var) -> Vec<(Var, Var)> {
        self.layout.dec.iter().map(|layer| (g.linear(enc, layer.cross.wk), g.linear(enc, layer.cross.wv))).collect()
    }

    /// Teacher-forced decoder pass; returns `(hidden, logits)` with one row
    /// per decoder input.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        cross: &[(Var, Var)],
        head: Head,
        inputs: &[usize],
        n_candidates: usize,
    ) -> Result<(Var, Var)> {
        self.check_decoder(head, inputs, n_candidates)?;
        let l = &self.layout;
        let table = match head {
            Head::Global => l.tok_emb,
            Head::Local => l.local.as_ref().expect("checked above").slot_emb,
        };
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let mut x = g.gather(table, inputs);
        let p = g.gather(l.dec_pos, &positions);
        x = g.add(x, p);
        x = g.dropout(x);
        for (layer, &(ck, cv)) in l.dec.iter().zip(cross) {
            let n = g.rms_norm(x, layer.norm1);
            let a = self.attention_block(g, &layer.self_attn, n, true);
            x = g.add(x, a);
            let n = g.rms_norm(x, layer.norm2);
            let q = g.linear(n, layer.cross.wq);
            let c = g.attention(q, ck, cv, self.config.n_heads, false);
            let c = g.linear(c, layer.cross.wo);
            let c = g.dropout(c);
            x = g.add(x, c);
            let n = g.rms_norm(x, layer.norm3);
            let f = self.ffn_block(g, &layer.ffn, n);
            x = g.add(x, f);
        }
        let hidden = g.rms_norm(x, l.dec_norm);
        let logits = g.linear(hidden, self.head_param(head)?);
        Ok((hidden, logits))
    }

    fn teacher_forced(&self, input: &InputSequence, head: Head, inputs: &[usize]) -> Result<Vec<StepDistribution>> {
        let mut g = self.graph(None);
        let enc = self.encode_graph(&mut g, input)?;
        let cross = self.cross_graph(&mut g, enc);
        let (h, z) = self.decode_graph(&mut g, &cross, head, inputs, input.n_candidates)?;
        let (h, z) = (g.value(h), g.value(z));
        Ok((0..h.rows).map(|t| StepDistribution { logits: z.row(t).to_vec(), hidden: h.row(t).to_vec() }).collect())
    }

    /// Teacher-forced global-head distributions after `[BOS] ++ prefix`; one
    /// entry per decoder position.
    pub fn forward(&self, input: &InputSequence, prefix: &[usize]) -> Result<Vec<StepDistribution>> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.start_input(Head::Global));
        inputs.extend_from_slice(prefix);
        self.teacher_forced(input, Head::Global, &inputs)
    }

    /// Local-index head distributions after emitting the candidate positions
    /// in `prefix`.
    pub fn local_variant_head(&self, input: &InputSequence, prefix: &[usize]) -> Result<Vec<StepDistribution>> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.start_input(Head::Local));
        inputs.extend(prefix.iter().map(|&p| self.feedback_input(Head::Local, p)));
        self.teacher_forced(input, Head::Local, &inputs)
    }

    /// `log π(target_t)` per step, where `π` is the temperature softmax,
    /// renormalized over `legal[t]` when given.
    pub fn sequence_log_probs(
        &self,
        input: &InputSequence,
        head: Head,
        targets: &[usize],
        legal: Option<&[Vec<usize>]>,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        self.check_targets(head, targets)?;
        let mut g = self.graph(None);
        let enc = self.encode_graph(&mut g, input)?;
        let cross = self.cross_graph(&mut g, enc);
        let (_, z) = self.decode_graph(&mut g, &cross, head, &self.decoder_inputs(head, targets), input.n_candidates)?;
        let lp = g.token_log_probs(z, targets, legal, temperature);
        Ok(g.value(lp).data.clone())
    }

    /// Mean per-token negative log-likelihood of `targets` under the full
    /// softmax, and its exact gradient.
    pub fn loss_and_grads(&self, input: &InputSequence, head: Head, targets: &[usize]) -> Result<(f64, Gradients)> {
        self.loss_and_grads_with(input, head, targets, None)
    }

    pub fn loss_and_grads_with(
        &self,
        input: &InputSequence,
        head: Head,
        targets: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Gradients)> {
        self.check_targets(head, targets)?;
        let mut g = self.graph(dropout_seed);
        let enc = self.encode_graph(&mut g, input)?;
        let cross = self.cross_graph(&mut g, enc);
        let (_, z) = self.decode_graph(&mut g, &cross, head, &self.decoder_inputs(head, targets), input.n_candidates)?;
        let lp = g.token_log_probs(z, targets, None, 1.0);
        let w = -1.0 / targets.len() as f64;
        let loss = g.weighted_sum(lp, &alloc::vec![w; targets.len()]);
        let value = g.value(loss).data[0];
        Ok((value, g.backward(loss)))
    }

    /// Run the encoder once for incremental decoding.
    pub fn encode(&self, input: &InputSequence) -> Result<EncodedInput> {
        let mut g = self.graph(None);
        let enc = self.encode_graph(&mut g, input)?;
        let enc = g.value(enc);
        let cross = self
            .layout
            .dec
            .iter()
            .map(|layer| (enc.matmul_t(self.params.get(layer.cross.wk)), enc.matmul_t(self.params.get(layer.cross.wv))))
            .collect();
        Ok(EncodedInput { cross, n_candidates: input.n_candidates })
    }

    pub fn start_decoder(&self) -> DecoderState {
        let d = self.config.d_model;
        let n = self.layout.dec.len();
        DecoderState {
            len: 0,
            keys: (0..n).map(|_| Matrix::zeros(0, d)).collect(),
            values: (0..n).map(|_| Matrix::zeros(0, d)).collect(),
        }
    }

    /// Feed one decoder input and return the distribution for the next
    /// output.
    pub fn decode_step(
        &self,
        enc: &EncodedInput,
        state: &mut DecoderState,
        head: Head,
        input: usize,
    ) -> Result<StepDistribution> {
        if state.len >= self.config.max_dec_len {
            bail!(Length, "decoder already holds max_dec_len = {} inputs", self.config.max_dec_len);
        }
        self.check_decoder(head, &[input], enc.n_candidates)?;
        let l = &self.layout;
        let p = &self.params;
        let table = match head {
            Head::Global => l.tok_emb,
            Head::Local => l.local.as_ref().expect("checked above").slot_emb,
        };
        let mut x = Matrix::from_vec(1, self.config.d_model, p.get(table).row(input).to_vec());
        x.data.iter_mut().zip(p.get(l.dec_pos).row(state.len)).for_each(|(a, b)| *a += b);
        let heads = self.config.n_heads;
        for (i, layer) in l.dec.iter().enumerate() {
            let (n, _) = rms_norm_rows(&x, &p.get(layer.norm1).data);
            let q = n.matmul_t(p.get(layer.self_attn.wq));
            push_row(&mut state.keys[i], &n.matmul_t(p.get(layer.self_attn.wk)).data);
            push_row(&mut state.values[i], &n.matmul_t(p.get(layer.self_attn.wv)).data);
            let (a, _) = attention_forward(&q, &state.keys[i], &state.values[i], heads, false);
            x.add_assign(&a.matmul_t(p.get(layer.self_attn.wo)));

            let (n, _) = rms_norm_rows(&x, &p.get(layer.norm2).data);
            let q = n.matmul_t(p.get(layer.cross.wq));
            let (ck, cv) = &enc.cross[i];
            let (c, _) = attention_forward(&q, ck, cv, heads, false);
            x.add_assign(&c.matmul_t(p.get(layer.cross.wo)));

            let (n, _) = rms_norm_rows(&x, &p.get(layer.norm3).data);
            let mut h = n.matmul_t(p.get(layer.ffn.w1));
            h.data.iter_mut().for_each(|v| *v = math::gelu(*v));
            x.add_assign(&h.matmul_t(p.get(layer.ffn.w2)));
        }
        state.len += 1;
        let (hidden, _) = rms_norm_rows(&x, &p.get(l.dec_norm).data);
        let logits = hidden.matmul_t(p.get(self.head_param(head)?));
        Ok(StepDistribution { logits: logits.data, hidden: hidden.data })
    }
}
