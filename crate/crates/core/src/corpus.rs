//! Item universe, interaction logs, rerank requests and the synthetic data
//! generator used for desk-scale experiments.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng;
use crate::ItemId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: ItemId,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(with = "label01")]
    pub label: bool,
}

mod label01 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(alloc::format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// Items indexed by id. All embeddings share one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    items: Vec<Item>,
    index: BTreeMap<ItemId, usize>,
}

impl Corpus {
    pub fn from_items(items: Vec<Item>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for item in items {
            corpus.push(item)?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, item: Item) -> Result<()> {
        if let Some(d) = self.dim() {
            if item.embedding.len() != d {
                bail!(
                    Integrity,
                    "item {} has embedding dimension {} but the corpus dimension is {d}",
                    item.item_id,
                    item.embedding.len()
                );
            }
        } else if item.embedding.is_empty() {
            bail!(Integrity, "item {} has an empty embedding", item.item_id);
        }
        if item.embedding.iter().any(|v| !v.is_finite()) {
            bail!(Integrity, "item {} has a non-finite embedding component", item.item_id);
        }
        if self.index.contains_key(&item.item_id) {
            bail!(Integrity, "duplicate item_id {}", item.item_id);
        }
        self.index.insert(item.item_id, self.items.len());
        self.items.push(item);
        Ok(())
    }

    /// Embedding dimension; `None` for an empty corpus.
    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.embedding.len())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index.contains_key(&id)
    }

    /// Item ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.index.keys().copied()
    }

    /// Check that every interaction references a known item and that each
    /// user's timestamps are strictly increasing in log order.
    pub fn validate_interactions(&self, interactions: &[Interaction]) -> Result<()> {
        let mut last: BTreeMap<u64, i64> = BTreeMap::new();
        for (i, it) in interactions.iter().enumerate() {
            if !self.contains(it.item_id) {
                bail!(Integrity, "interaction {i} references unknown item {}", it.item_id);
            }
            if let Some(&prev) = last.get(&it.user_id) {
                if it.timestamp <= prev {
                    bail!(Integrity, "interaction {i}: timestamps of user {} are not increasing", it.user_id);
                }
            }
            last.insert(it.user_id, it.timestamp);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub request_id: u64,
    pub user_id: u64,
    /// Index of the time window this request was cut from (0 = earliest).
    pub window: u32,
    /// Most recent last.
    pub history: Vec<ItemId>,
    /// Stored order is the candidate permutation used by every consumer.
    pub candidates: Vec<ItemId>,
    pub relevance: BTreeMap<ItemId, bool>,
}

impl RerankRequest {
    pub fn is_relevant(&self, item: ItemId) -> bool {
        self.relevance.get(&item).copied().unwrap_or(false)
    }

    pub fn total_relevant(&self) -> usize {
        self.relevance.values().filter(|&&r| r).count()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let set: BTreeSet<_> = self.candidates.iter().collect();
        if set.len() != self.candidates.len() {
            bail!(Integrity, "request {} has duplicate candidates", self.request_id);
        }
        if self.candidates.len() < k {
            bail!(
                Integrity,
                "request {} has {} candidates, fewer than K={k}",
                self.request_id,
                self.candidates.len()
            );
        }
        Ok(())
    }

    /// Copy of the request with candidates reordered by `perm` (new position
    /// `i` holds old candidate `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> RerankRequest {
        let mut out = self.clone();
        out.candidates = perm.iter().map(|&p| self.candidates[p]).collect();
        out
    }

    /// Explicit deterministic reshuffle of the candidate order.
    pub fn reshuffled(&self, seed: u64) -> RerankRequest {
        let mut out = self.clone();
        out.candidates.shuffle(&mut rng::seeded(seed));
        out
    }
}

/// Ordered output list. Construct through [`RankedList::new`], which enforces
/// the list invariants against the originating request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<ItemId>,
}

impl RankedList {
    pub fn new(items: Vec<ItemId>, request: &RerankRequest) -> Result<Self> {
        let list = RankedList { items };
        list.validate(request)?;
        Ok(list)
    }

    pub fn validate(&self, request: &RerankRequest) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(*item) {
                bail!(Integrity, "ranked list repeats item {item}");
            }
            if !request.candidates.contains(item) {
                bail!(Integrity, "ranked list item {item} is not a candidate of request {}", request.request_id);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub interactions_per_user: usize,
    /// Item embeddings lie within this distance of their cluster center.
    pub noise_radius: f64,
    /// Probability that an exposure is drawn from the user's favourite cluster
    /// instead of uniformly from the corpus.
    pub favored_exposure: f64,
    /// Label probability is `sigmoid(slope · (e·p / sqrt(D) − threshold))`.
    pub affinity_slope: f64,
    pub affinity_threshold: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_items: 1000,
            n_users: 200,
            dim: 16,
            n_clusters: 16,
            interactions_per_user: 40,
            noise_radius: 0.5,
            favored_exposure: 0.5,
            affinity_slope: 10.0,
            affinity_threshold: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_items", self.n_items),
            ("n_users", self.n_users),
            ("dim", self.dim),
            ("n_clusters", self.n_clusters),
            ("interactions_per_user", self.interactions_per_user),
        ] {
            if v == 0 {
                bail!(Argument, "{name} must be at least 1");
            }
        }
        if !(0.0..=1.0).contains(&self.favored_exposure) {
            bail!(Argument, "favored_exposure must lie in [0, 1]");
        }
        if !(self.noise_radius >= 0.0) {
            bail!(Argument, "noise_radius must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub interactions: Vec<Interaction>,
    pub centers: Vec<Vec<f64>>,
    /// Latent cluster of each item, in corpus order.
    pub item_clusters: Vec<usize>,
    /// Unit preference vector per user id.
    pub preferences: BTreeMap<u64, Vec<f64>>,
}

/// Synthetic corpus with default world parameters.
pub fn generate_synthetic(
    seed: u64,
    n_items: usize,
    n_users: usize,
    dim: usize,
    n_clusters: usize,
) -> Result<SyntheticData> {
    generate_synthetic_with(&SyntheticSpec { seed, n_items, n_users, dim, n_clusters, ..SyntheticSpec::default() })
}

pub fn generate_synthetic_with(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let d = spec.dim;

    let centers: Vec<Vec<f64>> =
        (0..spec.n_clusters).map(|_| (0..d).map(|_| rng::normal(&mut r)).collect()).collect();

    let mut items = Vec::with_capacity(spec.n_items);
    let mut item_clusters = Vec::with_capacity(spec.n_items);
    for id in 0..spec.n_items {
        let c = id % spec.n_clusters;
        let dir = unit_random(&mut r, d);
        let radius = spec.noise_radius * rng::uniform(&mut r);
        let embedding = centers[c].iter().zip(&dir).map(|(ci, di)| ci + radius * di).collect();
        items.push(Item { item_id: id as ItemId, embedding, text: None });
        item_clusters.push(c);
    }
    let mut by_cluster: Vec<Vec<usize>> = alloc::vec![Vec::new(); spec.n_clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        by_cluster[c].push(i);
    }

    let scale = 1.0 / crate::math::sqrt(d as f64);
    let mut preferences = BTreeMap::new();
    let mut interactions = Vec::new();
    for user in 0..spec.n_users as u64 {
        let fav = rng::index(&mut r, spec.n_clusters);
        let mut pref: Vec<f64> = centers[fav].iter().map(|c| c + 0.1 * rng::normal(&mut r)).collect();
        normalize(&mut pref);

        let budget = spec.interactions_per_user.min(spec.n_items);
        let mut seen = BTreeSet::new();
        let mut ts = 0i64;
        let mut attempts = 0;
        while seen.len() < budget && attempts < budget * 50 {
            attempts += 1;
            let idx = if rng::uniform(&mut r) < spec.favored_exposure && !by_cluster[fav].is_empty() {
                by_cluster[fav][rng::index(&mut r, by_cluster[fav].len())]
            } else {
                rng::index(&mut r, spec.n_items)
            };
            if !seen.insert(idx) {
                continue;
            }
            let affinity = dot(&items[idx].embedding, &pref) * scale;
            let p = crate::math::sigmoid(spec.affinity_slope * (affinity - spec.affinity_threshold));
            let label = rng::uniform(&mut r) < p;
            interactions.push(Interaction { user_id: user, item_id: idx as ItemId, timestamp: ts, label });
            ts += 1;
        }
        preferences.insert(user, pref);
    }

    Ok(SyntheticData { corpus: Corpus::from_items(items)?, interactions, centers, item_clusters, preferences })
}

fn unit_random(r: &mut rng::SeededRng, d: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng::normal(r)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = crate::math::sqrt(v.iter().map(|x| x * x).sum());
    if n == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How requests are cut from interaction logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequestSpec {
    /// Candidate set size N.
    pub n_candidates: usize,
    /// Output list length K.
    pub list_len: usize,
    /// Interactions per time window; each window becomes one request.
    pub window_size: usize,
    /// Number of trailing windows per user.
    pub windows: usize,
    pub seed: u64,
}

impl Default for RequestSpec {
    fn default() -> Self {
        Self { n_candidates: 50, list_len: 6, window_size: 10, windows: 3, seed: 11 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RequestSet {
    pub requests: Vec<RerankRequest>,
    /// Windows dropped because they held no positive interaction (or the
    /// negative pool was too small).
    pub skipped: usize,
}

/// Cut rerank requests from interaction logs.
///
/// For each user the last `windows · window_size` interactions form
/// consecutive windows. A window's positives become relevant candidates; the
/// rest of the candidate set is filled with items the user never interacted
/// with, sampled uniformly and never drawn from `exclude`. History holds the
/// positive items preceding the window. Candidate order is a seeded shuffle.
pub fn build_requests(
    corpus: &Corpus,
    interactions: &[Interaction],
    spec: &RequestSpec,
    exclude: &BTreeSet<ItemId>,
) -> Result<RequestSet> {
    let n = spec.n_candidates;
    let k = spec.list_len;
    if k == 0 || n < k {
        bail!(Argument, "need 1 <= K <= N, got K={k} N={n}");
    }
    if spec.window_size == 0 || spec.windows == 0 {
        bail!(Argument, "window_size and windows must be at least 1");
    }
    corpus.validate_interactions(interactions)?;

    let mut per_user: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
    for it in interactions {
        per_user.entry(it.user_id).or_default().push(*it);
    }
    let all_ids: Vec<ItemId> = corpus.ids().collect();

    let mut out = RequestSet::default();
    let mut next_id = 0u64;
    for (user, mut log) in per_user {
        log.sort_by_key(|it| it.timestamp);
        let touched: BTreeSet<ItemId> = log.iter().map(|it| it.item_id).collect();
        let pool: Vec<ItemId> =
            all_ids.iter().copied().filter(|id| !touched.contains(id) && !exclude.contains(id)).collect();

        for w in 0..spec.windows {
            let back = (spec.windows - w) * spec.window_size;
            if back > log.len() {
                out.skipped += 1;
                continue;
            }
            let start = log.len() - back;
            let window = &log[start..start + spec.window_size];
            let mut positives: Vec<ItemId> = window.iter().filter(|it| it.label).map(|it| it.item_id).collect();
            positives.truncate(n);
            if positives.is_empty() || pool.len() < n - positives.len() {
                out.skipped += 1;
                continue;
            }
            let mut r = rng::seeded(rng::derive(spec.seed, user.wrapping_mul(1 << 20) + w as u64));
            let mut negatives = pool.clone();
            let (chosen, _) = negatives.partial_shuffle(&mut r, n - positives.len());
            let mut candidates: Vec<ItemId> = positives.clone();
            candidates.extend_from_slice(chosen);
            candidates.shuffle(&mut r);

            let mut relevance: BTreeMap<ItemId, bool> = candidates.iter().map(|&c| (c, false)).collect();
            for p in &positives {
                relevance.insert(*p, true);
            }
            let history: Vec<ItemId> = log[..start].iter().filter(|it| it.label).map(|it| it.item_id).collect();
            out.requests.push(RerankRequest {
                request_id: next_id,
                user_id: user,
                window: w as u32,
                history,
                candidates,
                relevance,
            });
            next_id += 1;
        }
    }
    Ok(out)
}

/// Output of [`mask_items`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSplit {
    pub masked: BTreeSet<ItemId>,
    /// Interactions with every masked item removed.
    pub train: Vec<Interaction>,
    /// The full log; evaluation requests keep masked items.
    pub test: Vec<Interaction>,
}

/// Hide `round(fraction · |items|)` items from training.
///
/// Masked items are drawn first from `prefer` (typically the items that
/// occur in evaluation requests) and then from the rest of the corpus.
pub fn mask_items(
    corpus: &Corpus,
    interactions: &[Interaction],
    fraction: f64,
    seed: u64,
    prefer: &BTreeSet<ItemId>,
) -> Result<MaskedSplit> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("mask fraction {fraction} is outside [0, 1]")));
    }
    let count = libm::round(fraction * corpus.len() as f64) as usize;
    let mut r = rng::seeded(seed);
    let mut first: Vec<ItemId> = corpus.ids().filter(|id| prefer.contains(id)).collect();
    let mut rest: Vec<ItemId> = corpus.ids().filter(|id| !prefer.contains(id)).collect();
    first.shuffle(&mut r);
    rest.shuffle(&mut r);
    let masked: BTreeSet<ItemId> = first.into_iter().chain(rest).take(count).collect();
    let train = interactions.iter().filter(|it| !masked.contains(&it.item_id)).copied().collect();
    Ok(MaskedSplit { masked, train, test: interactions.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn item(id: ItemId, dim: usize) -> Item {
        Item { item_id: id, embedding: vec![id as f64; dim], text: None }
    }

    #[test]
    fn corpus_rejects_dimension_mismatch_and_duplicates() {
        let err = Corpus::from_items(vec![item(0, 8), item(1, 9)]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        let err = Corpus::from_items(vec![item(0, 8), item(0, 8)]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        let c = Corpus::from_items(vec![item(0, 8), item(1, 8), item(2, 8)]).unwrap();
        assert_eq!((c.len(), c.dim()), (3, Some(8)));
        assert_eq!(Corpus::default().dim(), None);
    }

    #[test]
    fn corpus_rejects_non_finite_embedding() {
        let bad = Item { item_id: 3, embedding: vec![0.0, f64::NAN], text: None };
        assert!(Corpus::from_items(vec![bad]).is_err());
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = generate_synthetic(7, 60, 5, 4, 3).unwrap();
        let b = generate_synthetic(7, 60, 5, 4, 3).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.interactions, b.interactions);
        let c = generate_synthetic(8, 60, 5, 4, 3).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn single_cluster_stays_within_noise_radius() {
        let spec = SyntheticSpec { n_items: 50, n_users: 2, dim: 5, n_clusters: 1, ..Default::default() };
        let data = generate_synthetic_with(&spec).unwrap();
        for it in data.corpus.items() {
            let d2: f64 = it.embedding.iter().zip(&data.centers[0]).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(crate::math::sqrt(d2) <= spec.noise_radius + 1e-12);
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(generate_synthetic(1, 0, 1, 1, 1).is_err());
        assert!(generate_synthetic(1, 1, 1, 1, 0).is_err());
    }

    fn small_world() -> SyntheticData {
        let spec = SyntheticSpec { n_items: 300, n_users: 20, dim: 8, n_clusters: 6, ..Default::default() };
        generate_synthetic_with(&spec).unwrap()
    }

    #[test]
    fn requests_have_exact_candidate_count_and_are_reproducible() {
        let data = small_world();
        let spec = RequestSpec { n_candidates: 50, list_len: 6, ..Default::default() };
        let set = build_requests(&data.corpus, &data.interactions, &spec, &BTreeSet::new()).unwrap();
        assert!(!set.requests.is_empty());
        for r in &set.requests {
            assert_eq!(r.candidates.len(), 50);
            r.validate(6).unwrap();
            assert!(r.total_relevant() >= 1);
            assert_eq!(r.relevance.len(), 50);
        }
        let again = build_requests(&data.corpus, &data.interactions, &spec, &BTreeSet::new()).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn requests_with_n_equal_k() {
        let data = small_world();
        let spec = RequestSpec { n_candidates: 6, list_len: 6, ..Default::default() };
        let set = build_requests(&data.corpus, &data.interactions, &spec, &BTreeSet::new()).unwrap();
        assert!(set.requests.iter().all(|r| r.candidates.len() == 6));
        let bad = RequestSpec { n_candidates: 5, list_len: 6, ..Default::default() };
        assert!(build_requests(&data.corpus, &data.interactions, &bad, &BTreeSet::new()).is_err());
    }

    #[test]
    fn users_without_positives_are_skipped() {
        let corpus = Corpus::from_items((0..80).map(|i| item(i, 2)).collect()).unwrap();
        let log: Vec<Interaction> =
            (0..10).map(|i| Interaction { user_id: 1, item_id: i, timestamp: i as i64, label: false }).collect();
        let spec = RequestSpec { n_candidates: 10, list_len: 3, window_size: 5, windows: 2, seed: 0 };
        let set = build_requests(&corpus, &log, &spec, &BTreeSet::new()).unwrap();
        assert!(set.requests.is_empty());
        assert_eq!(set.skipped, 2);
    }

    #[test]
    fn mask_fraction_bounds() {
        let data = small_world();
        let none = BTreeSet::new();
        assert!(mask_items(&data.corpus, &data.interactions, 1.5, 0, &none).is_err());
        let zero = mask_items(&data.corpus, &data.interactions, 0.0, 0, &none).unwrap();
        assert_eq!(zero.train, data.interactions);
        assert!(zero.masked.is_empty());
        let all = mask_items(&data.corpus, &data.interactions, 1.0, 0, &none).unwrap();
        assert!(all.train.is_empty());
        let five = mask_items(&data.corpus, &data.interactions, 0.05, 3, &none).unwrap();
        assert_eq!(five.masked.len(), 15);
        assert!(five.train.iter().all(|it| !five.masked.contains(&it.item_id)));
    }

    #[test]
    fn masked_items_never_enter_training_requests() {
        let data = small_world();
        let spec = RequestSpec::default();
        let split = mask_items(&data.corpus, &data.interactions, 0.2, 5, &BTreeSet::new()).unwrap();
        let train = build_requests(&data.corpus, &split.train, &spec, &split.masked).unwrap();
        for r in &train.requests {
            assert!(r.candidates.iter().chain(&r.history).all(|i| !split.masked.contains(i)));
        }
        let test = build_requests(&data.corpus, &split.test, &spec, &BTreeSet::new()).unwrap();
        assert!(test.requests.iter().any(|r| r.candidates.iter().any(|i| split.masked.contains(i))));
    }

    #[test]
    fn ranked_list_validation() {
        let req = RerankRequest {
            request_id: 0,
            user_id: 0,
            window: 0,
            history: vec![],
            candidates: vec![1, 2, 3],
            relevance: BTreeMap::new(),
        };
        assert!(RankedList::new(vec![3, 1], &req).is_ok());
        assert!(RankedList::new(vec![3, 3], &req).is_err());
        assert!(RankedList::new(vec![4], &req).is_err());
    }
}
