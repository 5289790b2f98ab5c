//! List-wise metrics, the list reward, and a minimal click simulator.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{dot, Corpus, RerankRequest};
use crate::error::{bail, Error, Result};
use crate::math;
use crate::rng;
use crate::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Ndcg,
    Map,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Precision, Metric::Ndcg, Metric::Map, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Ndcg => "ndcg",
            Metric::Map => "map",
            Metric::F1 => "f1",
        }
    }
}

/// Metrics of one list at cutoff `k`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub map_at_k: f64,
    pub f1_at_k: f64,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Precision => self.precision_at_k,
            Metric::Ndcg => self.ndcg_at_k,
            Metric::Map => self.map_at_k,
            Metric::F1 => self.f1_at_k,
        }
    }
}

/// Precision, NDCG, MAP and F1 at `k` with binary relevance. A request with
/// no relevant items scores 0 everywhere.
pub fn metrics_at_k(
    list: &[ItemId],
    is_relevant: impl Fn(ItemId) -> bool,
    k: usize,
    total_relevant: usize,
) -> Result<MetricReport> {
    if k == 0 {
        bail!(Argument, "cutoff K must be at least 1");
    }
    if list.len() < k {
        bail!(Argument, "list of length {} is shorter than K = {k}", list.len());
    }
    let mut report = MetricReport { k, ..Default::default() };
    if total_relevant == 0 {
        return Ok(report);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    let mut ap = 0.0;
    for (i, &item) in list[..k].iter().enumerate() {
        if is_relevant(item) {
            hits += 1;
            dcg += 1.0 / math::log2(i as f64 + 2.0);
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    let ideal = k.min(total_relevant);
    let idcg: f64 = (0..ideal).map(|i| 1.0 / math::log2(i as f64 + 2.0)).sum();
    let precision = hits as f64 / k as f64;
    let recall = hits as f64 / total_relevant as f64;
    report.precision_at_k = precision;
    report.ndcg_at_k = dcg / idcg;
    report.map_at_k = ap / ideal as f64;
    report.f1_at_k = if hits == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(report)
}

/// Metrics of a generated list against a request's labels.
pub fn request_metrics(list: &[ItemId], request: &RerankRequest, k: usize) -> Result<MetricReport> {
    metrics_at_k(list, |i| request.is_relevant(i), k, request.total_relevant())
}

/// Which metrics enter the reward; they are averaged arithmetically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub components: Vec<Metric>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { components: Metric::ALL.to_vec() }
    }
}

impl RewardSpec {
    pub fn aggregate(&self, report: &MetricReport) -> f64 {
        if self.components.is_empty() {
            return 0.0;
        }
        self.components.iter().map(|&m| report.get(m)).sum::<f64>() / self.components.len() as f64
    }
}

pub fn list_reward(list: &[ItemId], request: &RerankRequest, k: usize, spec: &RewardSpec) -> Result<f64> {
    Ok(spec.aggregate(&request_metrics(list, request, k)?))
}

/// Means over a set of per-request reports.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub requests: usize,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub map_at_k: f64,
    pub f1_at_k: f64,
    pub reward: f64,
}

impl MetricSummary {
    pub fn of(reports: &[MetricReport], spec: &RewardSpec) -> Self {
        let n = reports.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        Self {
            requests: n,
            precision_at_k: mean(&|r| r.precision_at_k),
            ndcg_at_k: mean(&|r| r.ndcg_at_k),
            map_at_k: mean(&|r| r.map_at_k),
            f1_at_k: mean(&|r| r.f1_at_k),
            reward: mean(&|r| spec.aggregate(r)),
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Precision => self.precision_at_k,
            Metric::Ndcg => self.ndcg_at_k,
            Metric::Map => self.map_at_k,
            Metric::F1 => self.f1_at_k,
        }
    }
}

/// Click model of the simulator: `P(click) = sigmoid(a · e·p + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    pub slope: f64,
    pub bias: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self { slope: 4.0, bias: -1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulationMode {
    Expectation,
    Bernoulli { seed: u64 },
}

/// Position-discounted clicks (`1 / log2(pos + 1)`), normalized by the sum
/// of discounts so the reward lies in `[0, 1]`.
pub fn simulate_user(
    list: &[ItemId],
    preference: &[f64],
    corpus: &Corpus,
    click: ClickModel,
    mode: SimulationMode,
) -> Result<f64> {
    if list.is_empty() {
        return Ok(0.0);
    }
    let mut r = match mode {
        SimulationMode::Bernoulli { seed } => Some(rng::seeded(seed)),
        SimulationMode::Expectation => None,
    };
    let mut total = 0.0;
    let mut norm = 0.0;
    for (i, &id) in list.iter().enumerate() {
        let item = corpus.get(id).ok_or_else(|| Error::Argument(alloc::format!("item {id} is not in the corpus")))?;
        if item.embedding.len() != preference.len() {
            bail!(
                Argument,
                "preference has dimension {}, item {id} has {}",
                preference.len(),
                item.embedding.len()
            );
        }
        let p = math::sigmoid(click.slope * dot(&item.embedding, preference) + click.bias);
        let disc = 1.0 / math::log2(i as f64 + 2.0);
        let clicked = match r.as_mut() {
            None => p,
            Some(r) => f64::from(u8::from(rng::uniform(r) < p)),
        };
        total += clicked * disc;
        norm += disc;
    }
    Ok(total / norm)
}
