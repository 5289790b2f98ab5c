//! A small reverse-mode tape over row-major matrices.
//!
//! Every op computes its value eagerly when it is recorded. Parameters never
//! enter the tape as values: ops that read weights (`gather`, `linear`,
//! `rms_norm`) refer to them by id and accumulate straight into a
//! [`Gradients`] buffer during [`Graph::backward`].

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, SeededRng};
use crate::tensor::{gemm_into, gemm_raw, Matrix, View, ViewMut};

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const RMS_EPS: f64 = 1e-6;

enum Op {
    Input,
    Gather { table: ParamId, ids: Vec<usize> },
    Add(Var, Var),
    Linear { x: Var, w: ParamId },
    RmsNorm { x: Var, gain: ParamId, inv_rms: Vec<f64> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    Dropout { x: Var, mask: Vec<f64> },
    TokenLogProbs { logits: Var, targets: Vec<usize>, probs: Matrix, temperature: f64 },
    Scalar { x: Var, grad: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    dropout: Option<(f64, SeededRng)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), dropout: None }
    }

    /// Enable dropout with rate `p`, drawing masks from `seed`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng::seeded(seed)));
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Rows `ids` of parameter `table`.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let value = self.params.get(table).gather_rows(ids);
        self.push(value, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// `x · Wᵀ` for a weight stored as `out × in`.
    pub fn linear(&mut self, x: Var, w: ParamId) -> Var {
        let value = self.value(x).matmul_t(self.params.get(w));
        self.push(value, Op::Linear { x, w })
    }

    pub fn rms_norm(&mut self, x: Var, gain: ParamId) -> Var {
        let (value, inv_rms) = rms_norm_rows(self.value(x), &self.params.get(gain).data);
        self.push(value, Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|&v| math::gelu(v)).collect());
        self.push(value, Op::Gelu(x))
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, r)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - *p;
        let n = self.nodes[x.0].value.data.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng::uniform(r) < keep { 1.0 / keep } else { 0.0 }).collect();
        let src = &self.nodes[x.0].value;
        let value = Matrix::from_vec(src.rows, src.cols, src.data.iter().zip(&mask).map(|(v, m)| v * m).collect());
        self.push(value, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention. `q: Tq×d`, `k, v: Tk×d`;
    /// heads are contiguous column blocks. With `causal`, query `i` only
    /// sees keys `0..=i` (requires `Tq == Tk`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, causal);
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Column vector of `log π(target_t)` where `π` is the softmax of row `t`
    /// of `logits / temperature`, restricted to `legal[t]` when given.
    pub fn token_log_probs(
        &mut self,
        logits: Var,
        targets: &[usize],
        legal: Option<&[Vec<usize>]>,
        temperature: f64,
    ) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows, targets.len(), "one target per logit row");
        let mut probs = Matrix::zeros(z.rows, z.cols);
        let mut out = Matrix::zeros(z.rows, 1);
        for t in 0..z.rows {
            let row = z.row(t);
            let subset = legal.map(|l| l[t].as_slice());
            let lse = math::log_sum_exp(row, subset, temperature);
            let p = probs.row_mut(t);
            match subset {
                Some(idx) => idx.iter().for_each(|&i| p[i] = math::exp(row[i] / temperature - lse)),
                None => p.iter_mut().zip(row).for_each(|(pi, &zi)| *pi = math::exp(zi / temperature - lse)),
            }
            out.data[t] = row[targets[t]] / temperature - lse;
            debug_assert!(subset.is_none_or(|s| s.contains(&targets[t])), "target outside the legal set");
        }
        self.push(out, Op::TokenLogProbs { logits, targets: targets.to_vec(), probs, temperature })
    }

    /// Scalar node with caller-supplied value and derivative `∂value/∂x`.
    pub fn scalar(&mut self, x: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape());
        self.push(Matrix::from_vec(1, 1, vec![value]), Op::Scalar { x, grad })
    }

    /// `Σ w_i x_i` over all elements of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data.len(), weights.len());
        let value = xv.data.iter().zip(weights).map(|(a, b)| a * b).sum();
        let grad = Matrix::from_vec(xv.rows, xv.cols, weights.to_vec());
        self.scalar(x, value, grad)
    }

    /// Reverse pass from a `1×1` node; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut grads);
        grads
    }

    pub fn backward_into(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward starts from a scalar");
        let mut node_grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(up) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Gather { table, ids } => {
                    let g = grads.get_mut(*table);
                    for (i, &id) in ids.iter().enumerate() {
                        for (dst, s) in g.row_mut(id).iter_mut().zip(up.row(i)) {
                            *dst += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads, *b, &up);
                    accumulate_owned(&mut node_grads, *a, up);
                }
                Op::Linear { x, w } => {
                    // y = x Wᵀ: dx = dy W, dW += dyᵀ x
                    let wm = self.params.get(*w);
                    gemm_into(grads.get_mut(*w), &up, true, self.value(*x), false, 1.0, 1.0);
                    let dx = up.matmul(wm);
                    accumulate_owned(&mut node_grads, *x, dx);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = &self.params.get(*gain).data;
                    let d = xv.cols;
                    let mut dx = Matrix::zeros(xv.rows, d);
                    let dg = grads.get_mut(*gain);
                    for r in 0..xv.rows {
                        let ir = inv_rms[r];
                        let xr = xv.row(r);
                        let ur = up.row(r);
                        let mut dot = 0.0;
                        for j in 0..d {
                            let n = xr[j] * ir;
                            dg.data[j] += ur[j] * n;
                            dot += ur[j] * gv[j] * n;
                        }
                        let mean = dot / d as f64;
                        let dxr = dx.row_mut(r);
                        for j in 0..d {
                            let n = xr[j] * ir;
                            dxr[j] = ir * (ur[j] * gv[j] - n * mean);
                        }
                    }
                    accumulate_owned(&mut node_grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = up;
                    dx.data.iter_mut().zip(&xv.data).for_each(|(g, &v)| *g *= math::gelu_grad(v));
                    accumulate_owned(&mut node_grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = up;
                    dx.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                    accumulate_owned(&mut node_grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) =
                        attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &up);
                    accumulate_owned(&mut node_grads, *q, dq);
                    accumulate_owned(&mut node_grads, *k, dk);
                    accumulate_owned(&mut node_grads, *v, dv);
                }
                Op::TokenLogProbs { logits, targets, probs, temperature } => {
                    // d log π(y) / d z_j = (1[j = y] − π_j) / τ, zero outside the legal set
                    let mut dz = Matrix::zeros(probs.rows, probs.cols);
                    for t in 0..probs.rows {
                        let u = up.data[t] / temperature;
                        let row = dz.row_mut(t);
                        for (dst, &p) in row.iter_mut().zip(probs.row(t)) {
                            *dst = -u * p;
                        }
                        row[targets[t]] += u;
                    }
                    accumulate_owned(&mut node_grads, *logits, dz);
                }
                Op::Scalar { x, grad } => {
                    let mut dx = grad.clone();
                    dx.scale(up.data[0]);
                    accumulate_owned(&mut node_grads, *x, dx);
                }
            }
        }
    }
}

fn accumulate(node_grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut node_grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(node_grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut node_grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise RMS normalization with a per-column gain. Returns the output and
/// `1 / rms` per row.
pub(crate) fn rms_norm_rows(x: &Matrix, gain: &[f64]) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let ir = 1.0 / math::sqrt(ms + RMS_EPS);
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * ir * g;
        }
        inv.push(ir);
    }
    (out, inv)
}

pub(crate) fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, causal: bool) -> (Matrix, Vec<Matrix>) {
    let (tq, d) = q.shape();
    let tk = k.rows;
    assert_eq!(d % heads, 0);
    assert!(!causal || tq == tk, "causal attention needs square scores");
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut out = Matrix::zeros(tq, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * dh;
        let mut s = Matrix::zeros(tq, tk);
        gemm_raw(
            tq,
            dh,
            tk,
            scale,
            View::columns(&q.data, d, c0, false),
            View::columns(&k.data, d, c0, true),
            0.0,
            ViewMut::of(&mut s),
        );
        for i in 0..tq {
            let row = s.row_mut(i);
            if causal {
                row[i + 1..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
            }
            math::softmax_in_place(row);
        }
        gemm_raw(
            tq,
            tk,
            dh,
            1.0,
            View::of(&s, false),
            View::columns(&v.data, d, c0, false),
            0.0,
            ViewMut::columns(&mut out.data, d, c0),
        );
        probs.push(s);
    }
    (out, probs)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    probs: &[Matrix],
    dout: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (tq, d) = q.shape();
    let tk = k.rows;
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut dq = Matrix::zeros(tq, d);
    let mut dk = Matrix::zeros(tk, d);
    let mut dv = Matrix::zeros(tk, d);
    for h in 0..heads {
        let c0 = h * dh;
        let p = &probs[h];
        // dV = Pᵀ dO
        gemm_raw(
            tk,
            tq,
            dh,
            1.0,
            View::of(p, true),
            View::columns(&dout.data, d, c0, false),
            0.0,
            ViewMut::columns(&mut dv.data, d, c0),
        );
        // dP = dO Vᵀ
        let mut ds = Matrix::zeros(tq, tk);
        gemm_raw(
            tq,
            dh,
            tk,
            1.0,
            View::columns(&dout.data, d, c0, false),
            View::columns(&v.data, d, c0, true),
            0.0,
            ViewMut::of(&mut ds),
        );
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..tq {
            let pr = p.row(i);
            let dr = ds.row_mut(i);
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            dr.iter_mut().zip(pr).for_each(|(g, &pi)| *g = pi * (*g - dot));
        }
        // dQ = scale · dS K ; dK = scale · dSᵀ Q
        gemm_raw(
            tq,
            tk,
            dh,
            scale,
            View::of(&ds, false),
            View::columns(&k.data, d, c0, false),
            0.0,
            ViewMut::columns(&mut dq.data, d, c0),
        );
        gemm_raw(
            tk,
            tq,
            dh,
            scale,
            View::of(&ds, true),
            View::columns(&q.data, d, c0, false),
            0.0,
            ViewMut::columns(&mut dk.data, d, c0),
        );
    }
    (dq, dk, dv)
}
