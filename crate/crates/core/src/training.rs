//! Supervised pre-training on scored permutations and GRPO post-training.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{RankedList, RerankRequest};
use crate::decode::{DecodeTask, Decoded, Prepared, SampleMode};
use crate::error::{bail, Error, Result};
use crate::eval::{list_reward, RewardSpec};
use crate::math;
use crate::model::{Gradients, Head, InputSequence, RerankerModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::Matrix;
use crate::tokenizer::{SidTable, TokenVocabulary};
use crate::ItemId;

/// Proxy evaluator used to pick pre-training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyScorer {
    /// Mean of the four list metrics against the ground-truth labels.
    OracleReward,
    /// `Σ_{relevant rank i} hits(≤ i) / i`: precision-weighted clicks over
    /// the list prefix; needs no relevant-count normalization.
    ClickPrefix,
}

impl ProxyScorer {
    pub fn score(self, list: &[ItemId], request: &RerankRequest, k: usize) -> Result<f64> {
        match self {
            ProxyScorer::OracleReward => list_reward(list, request, k, &RewardSpec::default()),
            ProxyScorer::ClickPrefix => {
                let mut hits = 0usize;
                let mut score = 0.0;
                for (i, &item) in list.iter().take(k).enumerate() {
                    if request.is_relevant(item) {
                        hits += 1;
                        score += hits as f64 / (i + 1) as f64;
                    }
                }
                Ok(score)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSpec {
    /// Sampled permutations per request (L).
    pub samples: usize,
    pub scorer: ProxyScorer,
    pub k: usize,
    /// Enumerate every K-permutation when there are at most this many.
    pub enumeration_limit: u64,
    pub seed: u64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self { samples: 20, scorer: ProxyScorer::OracleReward, k: 6, enumeration_limit: 720, seed: 13 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainTarget {
    pub request_id: u64,
    pub list: RankedList,
    pub proxy_score: f64,
    /// Whether every K-permutation was scored instead of a sample.
    pub enumerated: bool,
}

/// `n! / (n − k)!`, saturating.
pub fn permutation_count(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    ((n - k + 1)..=n).fold(1u64, |acc, x| acc.saturating_mul(x as u64))
}

fn all_k_permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(n: usize, k: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                current.push(i);
                rec(n, k, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    rec(n, k, &mut current, &mut used, &mut out);
    out
}

/// Pick `Y*` for one request: score `L` distinct uniformly sampled
/// K-permutations (or all of them when there are few) and keep the best,
/// breaking ties by the lexicographically smallest item-id sequence.
pub fn pretrain_target(request: &RerankRequest, spec: &TargetSpec, seed: u64) -> Result<PretrainTarget> {
    let n = request.candidates.len();
    let k = spec.k;
    if spec.samples == 0 {
        bail!(Argument, "need at least one sampled permutation");
    }
    if k == 0 || k > n {
        bail!(Argument, "need 1 <= K <= N, got K={k}, N={n}");
    }
    let total = permutation_count(n, k);
    let enumerated = total <= spec.enumeration_limit || spec.samples as u64 >= total;
    let perms: Vec<Vec<usize>> = if enumerated {
        all_k_permutations(n, k)
    } else {
        let mut r = rng::seeded(seed);
        let mut seen = BTreeSet::new();
        let mut order: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(spec.samples);
        while out.len() < spec.samples {
            let (head, _) = order.partial_shuffle(&mut r, k);
            let p = head.to_vec();
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        out
    };
    let mut best: Option<(f64, Vec<ItemId>)> = None;
    for p in perms {
        let items: Vec<ItemId> = p.iter().map(|&i| request.candidates[i]).collect();
        let score = spec.scorer.score(&items, request, k)?;
        let better = match &best {
            None => true,
            Some((s, b)) => score > *s || (score == *s && items < *b),
        };
        if better {
            best = Some((score, items));
        }
    }
    let (proxy_score, items) = best.expect("at least one permutation");
    Ok(PretrainTarget { request_id: request.request_id, list: RankedList::new(items, request)?, proxy_score, enumerated })
}

pub fn build_pretrain_targets(requests: &[RerankRequest], spec: &TargetSpec) -> Result<Vec<PretrainTarget>> {
    requests.iter().map(|r| pretrain_target(r, spec, rng::derive(spec.seed, r.request_id))).collect()
}

/// Head outputs that generate `list`: concatenated SID tokens for the
/// global head, candidate positions for the local head.
pub fn target_outputs(
    head: Head,
    request: &RerankRequest,
    list: &RankedList,
    table: &SidTable,
    vocab: &TokenVocabulary,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &item in &list.items {
        match head {
            Head::Global => out.extend(vocab.item_tokens(table, item)?),
            Head::Local => out.push(
                request
                    .candidates
                    .iter()
                    .position(|&c| c == item)
                    .ok_or_else(|| Error::Integrity(format!("item {item} is not a candidate")))?,
            ),
        }
    }
    Ok(out)
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub request_id: u64,
    pub input: InputSequence,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 8, optimizer: AdamWConfig::default(), seed: 17 }
    }
}

/// Loss per optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(u64, f64)>,
}

impl Curve {
    pub fn push(&mut self, step: u64, value: f64) {
        self.points.push((step, value));
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.1)
    }
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradients(
    model: &RerankerModel,
    head: Head,
    batch: &[&TrainingExample],
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros_like(model.params());
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let seed = dropout_seed.map(|s| rng::derive(s, i as u64));
        let (l, g) = model.loss_and_grads_with(&ex.input, head, &ex.targets, seed)?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// AdamW over shuffled mini-batches of mean per-token NLL.
pub fn pretrain(
    model: &mut RerankerModel,
    head: Head,
    examples: &[TrainingExample],
    config: &PretrainConfig,
    optimizer: &mut AdamW,
) -> Result<Curve> {
    if examples.is_empty() {
        bail!(Argument, "no pre-training examples");
    }
    if config.batch_size == 0 {
        bail!(Argument, "batch size must be at least 1");
    }
    let mut curve = Curve::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::seeded(rng::derive(config.seed, epoch as u64)));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let step = optimizer.step + 1;
            let (loss, grads) = batch_gradients(model, head, &batch, Some(rng::derive(config.seed ^ 0xD0, step)))?;
            if !loss.is_finite() || !grads.is_finite() {
                let ids: Vec<u64> = batch.iter().map(|e| e.request_id).collect();
                bail!(
                    Numerical,
                    "pre-training loss {loss} at step {step} (requests {ids:?}, grad norm {})",
                    grads.global_norm()
                );
            }
            optimizer.update(model.params_mut(), &grads)?;
            curve.push(step, loss);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub clip: f64,
    /// KL penalty weight against the reference policy.
    pub beta: f64,
    pub std_eps: f64,
    /// Requests per update.
    pub batch_size: usize,
    pub k: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 20,
            temperature: 1.0,
            clip: 0.2,
            beta: 0.0,
            std_eps: 1e-8,
            batch_size: 4,
            k: 6,
            optimizer: AdamWConfig { lr: 5e-6, ..AdamWConfig::default() },
            seed: 23,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            bail!(Argument, "group size must be at least 2");
        }
        if !(self.temperature > 0.0) {
            bail!(Argument, "temperature must be positive");
        }
        if !(self.clip >= 0.0) || !(self.beta >= 0.0) {
            bail!(Argument, "clip and beta must be non-negative");
        }
        if self.batch_size == 0 || self.k == 0 {
            bail!(Argument, "batch size and K must be at least 1");
        }
        Ok(())
    }
}

/// Group-standardized advantages with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    let m = math::mean(rewards);
    let s = math::std_dev(rewards);
    rewards.iter().map(|r| (r - m) / (s + std_eps)).collect()
}

/// A training request for GRPO.
pub struct GrpoRequest<'a> {
    pub request: &'a RerankRequest,
    pub prepared: &'a Prepared,
}

/// Rollouts of one request.
#[derive(Debug, Clone)]
pub struct GroupSample {
    pub request_id: u64,
    pub rollouts: Vec<Decoded>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Reference-policy log-probs per rollout token, when `β > 0`.
    pub reference: Option<Vec<Vec<f64>>>,
}

/// Draw `G` constrained rollouts and score them.
pub fn sample_group(
    model: &RerankerModel,
    reference: Option<&RerankerModel>,
    head: Head,
    req: &GrpoRequest<'_>,
    config: &GrpoConfig,
    seed: u64,
) -> Result<GroupSample> {
    let task = DecodeTask::new(model, head, req.prepared, req.request, config.k)?;
    let spec = RewardSpec::default();
    let mut rollouts = Vec::with_capacity(config.group_size);
    let mut rewards = Vec::with_capacity(config.group_size);
    for i in 0..config.group_size {
        let d = task.sample(SampleMode::Temperature(config.temperature), rng::derive(seed, i as u64))?;
        d.list.validate(req.request)?;
        let r = list_reward(&d.list.items, req.request, config.k, &spec)?;
        if !r.is_finite() {
            bail!(Numerical, "reward {r} for request {}", req.request.request_id);
        }
        rollouts.push(d);
        rewards.push(r);
    }
    let advantages = group_advantages(&rewards, config.std_eps);
    let reference = match (reference, config.beta > 0.0) {
        (Some(rm), true) => Some(group_log_probs(rm, head, &req.prepared.input, &rollouts, config.temperature)?),
        _ => None,
    };
    Ok(GroupSample { request_id: req.request.request_id, rollouts, rewards, advantages, reference })
}

/// Teacher-forced masked log-probs of several rollouts sharing one encoder
/// pass.
pub fn group_log_probs(
    model: &RerankerModel,
    head: Head,
    input: &InputSequence,
    rollouts: &[Decoded],
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut g = model.graph(None);
    let enc = model.encode_graph(&mut g, input)?;
    let cross = model.cross_graph(&mut g, enc);
    let mut out = Vec::with_capacity(rollouts.len());
    for d in rollouts {
        let inputs = model.decoder_inputs(head, &d.tokens);
        let (_, z) = model.decode_graph(&mut g, &cross, head, &inputs, input.n_candidates)?;
        let lp = g.token_log_probs(z, &d.tokens, Some(&d.legal), temperature);
        out.push(g.value(lp).data.clone());
    }
    Ok(out)
}

/// Per-token terms of the clipped surrogate with optional KL penalty.
/// Returns the objective contribution and its derivative with respect to
/// each new log-prob.
pub fn surrogate_terms(
    new_logp: &[f64],
    old_logp: &[f64],
    ref_logp: Option<&[f64]>,
    advantage: f64,
    clip: f64,
    beta: f64,
) -> (f64, Vec<f64>, f64) {
    let mut value = 0.0;
    let mut kl_total = 0.0;
    let mut grad = Vec::with_capacity(new_logp.len());
    for (t, (&lp, &old)) in new_logp.iter().zip(old_logp).enumerate() {
        let ratio = math::exp(lp - old);
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        let (surr, mut d) =
            if ratio * advantage <= clipped * advantage { (ratio * advantage, ratio * advantage) } else { (clipped * advantage, 0.0) };
        let mut term = surr;
        if let Some(r) = ref_logp {
            // k3 estimator of KL(π ‖ π_ref)
            let delta = r[t] - lp;
            let kl = math::exp(delta) - delta - 1.0;
            term -= beta * kl;
            d += beta * (math::exp(delta) - 1.0);
            kl_total += kl;
        }
        value += term;
        grad.push(d);
    }
    (value, grad, kl_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrpoStats {
    pub step: u64,
    pub mean_reward: f64,
    pub objective: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
}

/// Objective gradient for a set of sampled groups (ascent direction is the
/// negative of the returned gradient; it is a loss gradient).
pub fn grpo_gradients(
    model: &RerankerModel,
    head: Head,
    batch: &[GrpoRequest<'_>],
    groups: &[GroupSample],
    config: &GrpoConfig,
) -> Result<(f64, f64, Gradients)> {
    let mut total = Gradients::zeros_like(model.params());
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut kl_tokens = 0usize;
    let per_request = 1.0 / batch.len() as f64;
    for (req, group) in batch.iter().zip(groups) {
        let mut g = model.graph(None);
        let enc = model.encode_graph(&mut g, &req.prepared.input)?;
        let cross = model.cross_graph(&mut g, enc);
        let mut loss = None;
        let weight = per_request / group.rollouts.len() as f64;
        for (i, d) in group.rollouts.iter().enumerate() {
            let inputs = model.decoder_inputs(head, &d.tokens);
            let (_, z) = model.decode_graph(&mut g, &cross, head, &inputs, req.prepared.input.n_candidates)?;
            let lp = g.token_log_probs(z, &d.tokens, Some(&d.legal), config.temperature);
            let new_logp = g.value(lp).data.clone();
            let reference = group.reference.as_ref().map(|r| r[i].as_slice());
            let (value, grad, k) =
                surrogate_terms(&new_logp, &d.step_logprobs, reference, group.advantages[i], config.clip, config.beta);
            let scale = -weight / d.tokens.len() as f64;
            objective += weight * value / d.tokens.len() as f64;
            kl += k;
            kl_tokens += d.tokens.len();
            let grad = Matrix::from_vec(grad.len(), 1, grad.into_iter().map(|x| x * scale).collect());
            let term = g.scalar(lp, scale * value, grad);
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        if let Some(loss) = loss {
            g.backward_into(loss, &mut total);
        }
    }
    let mean_kl = if kl_tokens == 0 { 0.0 } else { kl / kl_tokens as f64 };
    Ok((objective, mean_kl, total))
}

/// Sample groups for `batch`, then take one AdamW step on the clipped
/// surrogate. Old log-probs are those recorded while sampling.
pub fn grpo_step(
    model: &mut RerankerModel,
    reference: Option<&RerankerModel>,
    head: Head,
    batch: &[GrpoRequest<'_>],
    config: &GrpoConfig,
    optimizer: &mut AdamW,
    seed: u64,
) -> Result<(GrpoStats, Vec<GroupSample>)> {
    config.validate()?;
    if batch.is_empty() {
        bail!(Argument, "empty GRPO batch");
    }
    let mut groups = Vec::with_capacity(batch.len());
    for (i, req) in batch.iter().enumerate() {
        groups.push(sample_group(model, reference, head, req, config, rng::derive(seed, i as u64))?);
    }
    let (objective, mean_kl, grads) = grpo_gradients(model, head, batch, &groups, config)?;
    if !grads.is_finite() {
        bail!(Numerical, "non-finite GRPO gradient at step {}", optimizer.step + 1);
    }
    let grad_norm = optimizer.update(model.params_mut(), &grads)?;
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let stats = GrpoStats { step: optimizer.step, mean_reward: math::mean(&rewards), objective, mean_kl, grad_norm };
    Ok((stats, groups))
}

/// Repeated [`grpo_step`] over seeded batches; `on_step` sees the stats and
/// the model after every update (use it for held-out snapshots).
pub fn posttrain(
    model: &mut RerankerModel,
    reference: Option<&RerankerModel>,
    head: Head,
    requests: &[GrpoRequest<'_>],
    config: &GrpoConfig,
    steps: usize,
    optimizer: &mut AdamW,
    mut on_step: impl FnMut(&GrpoStats, &RerankerModel) -> Result<()>,
) -> Result<Curve> {
    if steps > 0 && requests.is_empty() {
        bail!(Argument, "no post-training requests");
    }
    let mut curve = Curve::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(requests.len()) {
            if cursor == order.len() {
                order = (0..requests.len()).collect();
                order.shuffle(&mut rng::seeded(rng::derive(config.seed, pass)));
                pass += 1;
                cursor = 0;
            }
            let r = &requests[order[cursor]];
            batch.push(GrpoRequest { request: r.request, prepared: r.prepared });
            cursor += 1;
        }
        let seed = rng::derive(config.seed ^ 0x6770, step as u64);
        let (stats, _) = grpo_step(model, reference, head, &batch, config, optimizer, seed)?;
        curve.push(stats.step, stats.mean_reward);
        on_step(&stats, model)?;
    }
    Ok(curve)
}

/// Default pre-training optimizer.
pub fn pretrain_optimizer(model: &RerankerModel, config: &PretrainConfig) -> AdamW {
    AdamW::new(config.optimizer, model.params())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_counts() {
        assert_eq!(permutation_count(3, 3), 6);
        assert_eq!(permutation_count(50, 6), 11_441_304_000);
        assert_eq!(permutation_count(4, 5), 0);
        assert_eq!(all_k_permutations(4, 2).len(), 12);
    }

    #[test]
    fn advantages_standardize_with_population_std() {
        let a = group_advantages(&[2.0, 4.0, 6.0], 1e-8);
        assert!((a[0] + 1.224_744_871).abs() < 1e-6);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - 1.224_744_871).abs() < 1e-6);
        assert!(group_advantages(&[0.3; 5], 1e-8).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn surrogate_gradient_is_zero_outside_the_clip_window() {
        let (v, g, _) = surrogate_terms(&[0.0], &[-1.0], None, 1.0, 0.2, 0.0);
        assert!((v - 1.2).abs() < 1e-12);
        assert_eq!(g, vec![0.0]);
        let (v, g, _) = surrogate_terms(&[-1.0], &[-1.0], None, -2.0, 0.2, 0.0);
        assert!((v + 2.0).abs() < 1e-12);
        assert!((g[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_penalty_lowers_the_objective_monotonically_in_beta() {
        let new = [-0.5, -1.0, -2.0];
        let old = new;
        let reference = [-0.7, -0.4, -2.5];
        let mut last = f64::INFINITY;
        for beta in [0.0, 0.1, 0.5, 1.0] {
            let (v, _, kl) = surrogate_terms(&new, &old, Some(&reference), 0.5, 0.2, beta);
            assert!(kl.is_finite() && kl > 0.0);
            assert!(v <= last);
            last = v;
        }
    }
}
