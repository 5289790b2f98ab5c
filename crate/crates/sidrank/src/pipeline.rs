//! In-memory experiment stages shared by the CLI commands and the
//! experiment harnesses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sidrank_core::corpus::{
    build_requests, generate_synthetic_with, mask_items, Corpus, Interaction, RerankRequest,
};
use sidrank_core::decode::{prepare, DecodeTask, Prepared};
use sidrank_core::eval::{request_metrics, simulate_user, Metric, MetricReport, MetricSummary, SimulationMode};
use sidrank_core::model::{serialize_input, Head, RerankerModel};
use sidrank_core::optim::AdamW;
use sidrank_core::tokenizer::{assign_sids, atomic_sids, fit_rq_kmeans, RqCodebooks, SidTable, TokenVocabulary};
use sidrank_core::training::{
    build_pretrain_targets, posttrain, pretrain, target_outputs, Curve, GrpoRequest, PretrainTarget,
    TrainingExample,
};
use sidrank_core::ItemId;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::formats::{load_corpus, load_interactions, DecodeRecord};

/// Corpus, logs and the train/test request split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub interactions: Vec<Interaction>,
    /// User preference vectors, known only for synthetic data.
    pub preferences: BTreeMap<u64, Vec<f64>>,
    pub train: Vec<RerankRequest>,
    pub test: Vec<RerankRequest>,
    pub skipped: usize,
}

/// Requests from the last `holdout_windows` windows of each user form the
/// test split; earlier windows train.
pub fn split_requests(requests: Vec<RerankRequest>, config: &ExperimentConfig) -> (Vec<RerankRequest>, Vec<RerankRequest>) {
    let cut = (config.data.requests.windows - config.data.holdout_windows) as u32;
    requests.into_iter().partition(|r| r.window < cut)
}

pub fn build_dataset(config: &ExperimentConfig) -> CliResult<Dataset> {
    let (corpus, interactions, preferences) = match (&config.data.items_path, &config.data.interactions_path) {
        (Some(items), Some(log)) => {
            let corpus = load_corpus(items.as_ref())?;
            let interactions = load_interactions(log.as_ref(), &corpus)?;
            (corpus, interactions, BTreeMap::new())
        }
        _ => {
            let synth = generate_synthetic_with(&config.data.synthetic)?;
            (synth.corpus, synth.interactions, synth.preferences)
        }
    };
    let set = build_requests(&corpus, &interactions, &config.data.requests, &BTreeSet::new())?;
    let (train, test) = split_requests(set.requests, config);
    Ok(Dataset { corpus, interactions, preferences, train, test, skipped: set.skipped })
}

/// Item token strings and the vocabulary they live in.
#[derive(Debug, Clone)]
pub struct Tokens {
    pub table: SidTable,
    pub vocab: TokenVocabulary,
    pub codebooks: Option<RqCodebooks>,
}

impl Tokens {
    pub fn from_table(table: SidTable, codebooks: Option<RqCodebooks>) -> Self {
        let vocab = TokenVocabulary::for_table(&table);
        Self { table, vocab, codebooks }
    }
}

pub fn tokenize(config: &ExperimentConfig, corpus: &Corpus) -> CliResult<Tokens> {
    let t = &config.tokenizer;
    let codebooks = fit_rq_kmeans(corpus, t.levels, t.codebook_size, t.iters, t.seed)?;
    let table = assign_sids(corpus, &codebooks)?;
    Ok(Tokens::from_table(table, Some(codebooks)))
}

/// One token per item: the atomic-ID control.
pub fn atomic_tokens(corpus: &Corpus) -> CliResult<Tokens> {
    Ok(Tokens::from_table(atomic_sids(corpus)?, None))
}

pub fn new_model(config: &ExperimentConfig, tokens: &Tokens, head: Head) -> CliResult<RerankerModel> {
    let local = (head == Head::Local).then_some(config.data.requests.n_candidates);
    let mc = config.model_config(tokens.vocab.item_token_len(), tokens.vocab.size(), local);
    Ok(RerankerModel::new(mc, config.model.init_seed)?)
}

fn max_enc_len(model: &RerankerModel) -> usize {
    model.config().max_enc_len
}

pub fn training_examples(
    config: &ExperimentConfig,
    tokens: &Tokens,
    head: Head,
    model: &RerankerModel,
    requests: &[RerankRequest],
    targets: &[PretrainTarget],
) -> CliResult<Vec<TrainingExample>> {
    requests
        .iter()
        .zip(targets)
        .map(|(r, t)| {
            Ok(TrainingExample {
                request_id: r.request_id,
                input: serialize_input(r, &tokens.table, &tokens.vocab, config.model.history_cap, max_enc_len(model))?,
                targets: target_outputs(head, r, &t.list, &tokens.table, &tokens.vocab)?,
            })
        })
        .collect()
}

/// Output of a training stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub optimizer: AdamW,
    pub curve: Curve,
}

/// Supervised pre-training on oracle-selected targets.
pub fn pretrain_stage(
    config: &ExperimentConfig,
    tokens: &Tokens,
    head: Head,
    model: &mut RerankerModel,
    requests: &[RerankRequest],
    epochs: usize,
) -> CliResult<(Vec<PretrainTarget>, StageResult)> {
    let targets = build_pretrain_targets(requests, &config.target_spec())?;
    let examples = training_examples(config, tokens, head, model, requests, &targets)?;
    let pc = sidrank_core::training::PretrainConfig { epochs, ..config.pretrain_config() };
    let mut optimizer = AdamW::new(pc.optimizer, model.params());
    let curve = if examples.is_empty() { Curve::default() } else { pretrain(model, head, &examples, &pc, &mut optimizer)? };
    Ok((targets, StageResult { optimizer, curve }))
}

pub fn prepare_all(
    config: &ExperimentConfig,
    tokens: &Tokens,
    head: Head,
    model: &RerankerModel,
    requests: &[RerankRequest],
) -> CliResult<Vec<Prepared>> {
    requests
        .iter()
        .map(|r| Ok(prepare(head, r, &tokens.table, &tokens.vocab, config.model.history_cap, max_enc_len(model))?))
        .collect()
}

/// GRPO post-training; with `beta > 0` the starting model is the reference.
pub fn posttrain_stage(
    config: &ExperimentConfig,
    tokens: &Tokens,
    head: Head,
    model: &mut RerankerModel,
    requests: &[RerankRequest],
    steps: usize,
    mut log: impl FnMut(u64, f64),
) -> CliResult<StageResult> {
    let gc = config.grpo_config();
    let prepared = prepare_all(config, tokens, head, model, requests)?;
    let batch: Vec<GrpoRequest<'_>> =
        requests.iter().zip(&prepared).map(|(r, p)| GrpoRequest { request: r, prepared: p }).collect();
    let reference = (gc.beta > 0.0).then(|| model.clone());
    let mut optimizer = AdamW::new(gc.optimizer, model.params());
    let curve = posttrain(model, reference.as_ref(), head, &batch, &gc, steps, &mut optimizer, |s, _| {
        log(s.step, s.mean_reward);
        Ok(())
    })?;
    Ok(StageResult { optimizer, curve })
}

/// Beam search over every request; each entry holds the beams best first.
pub fn decode_all(
    config: &ExperimentConfig,
    tokens: &Tokens,
    head: Head,
    model: &RerankerModel,
    requests: &[RerankRequest],
) -> CliResult<Vec<Vec<DecodeRecord>>> {
    let mut out = Vec::with_capacity(requests.len());
    for r in requests {
        let p = prepare(head, r, &tokens.table, &tokens.vocab, config.model.history_cap, max_enc_len(model))?;
        let task = DecodeTask::new(model, head, &p, r, config.k())?;
        let beams = task.beam_search(config.decode.beam)?;
        out.push(
            beams
                .into_iter()
                .enumerate()
                .map(|(rank, d)| DecodeRecord {
                    request_id: r.request_id,
                    items: d.list.items,
                    logprob: d.logprob,
                    beam_rank: rank,
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Per-request metrics and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<(u64, MetricReport, f64)>,
    pub summary: MetricSummary,
    /// Mean simulated-click reward when user preferences are known.
    pub simulated: Option<f64>,
}

impl Evaluation {
    pub fn metric(&self, m: Metric) -> f64 {
        self.summary.get(m)
    }
}

/// Score the top list of every request. Requests without a decoded list
/// are an integrity error.
pub fn evaluate(
    config: &ExperimentConfig,
    data: &Dataset,
    requests: &[RerankRequest],
    decoded: &[DecodeRecord],
) -> CliResult<Evaluation> {
    let top: BTreeMap<u64, &DecodeRecord> =
        decoded.iter().filter(|d| d.beam_rank == 0).map(|d| (d.request_id, d)).collect();
    let k = config.k();
    let mut rows = Vec::with_capacity(requests.len());
    let mut reports = Vec::with_capacity(requests.len());
    let mut sims = Vec::new();
    for r in requests {
        let Some(d) = top.get(&r.request_id) else {
            return Err(sidrank_core::Error::Integrity(format!("no decoded list for request {}", r.request_id)).into());
        };
        sidrank_core::corpus::RankedList::new(d.items.clone(), r)?;
        let m = request_metrics(&d.items, r, k)?;
        rows.push((r.request_id, m, config.eval.reward.aggregate(&m)));
        reports.push(m);
        if let Some(pref) = data.preferences.get(&r.user_id) {
            sims.push(simulate_user(&d.items[..k], pref, &data.corpus, config.eval.click, SimulationMode::Expectation)?);
        }
    }
    let simulated = (!sims.is_empty() && sims.len() == requests.len()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);
    Ok(Evaluation { rows, summary: MetricSummary::of(&reports, &config.eval.reward), simulated })
}

/// Decode with beam search and evaluate.
pub fn decode_and_evaluate(
    config: &ExperimentConfig,
    data: &Dataset,
    tokens: &Tokens,
    head: Head,
    model: &RerankerModel,
    requests: &[RerankRequest],
) -> CliResult<Evaluation> {
    let decoded: Vec<DecodeRecord> = decode_all(config, tokens, head, model, requests)?.into_iter().flatten().collect();
    evaluate(config, data, requests, &decoded)
}

/// Fraction of target tokens that greedy decoding reproduces position by
/// position.
pub fn token_accuracy(
    config: &ExperimentConfig,
    tokens: &Tokens,
    head: Head,
    model: &RerankerModel,
    requests: &[RerankRequest],
    targets: &[PretrainTarget],
) -> CliResult<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, t) in requests.iter().zip(targets) {
        let want = target_outputs(head, r, &t.list, &tokens.table, &tokens.vocab)?;
        let p = prepare(head, r, &tokens.table, &tokens.vocab, config.model.history_cap, max_enc_len(model))?;
        let got = DecodeTask::new(model, head, &p, r, config.k())?.greedy()?;
        hits += got.tokens.iter().zip(&want).filter(|(a, b)| a == b).count();
        total += want.len();
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Capacity check: a fresh model pre-trained on the first
/// `eval.accuracy_subset` training requests for `pretrain.memorize_epochs`
/// epochs, and the greedy token accuracy it reaches on them.
pub fn memorization_check(config: &ExperimentConfig, data: &Dataset, tokens: &Tokens) -> CliResult<f64> {
    let subset: Vec<RerankRequest> = data.train.iter().take(config.eval.accuracy_subset).cloned().collect();
    let mut model = new_model(config, tokens, Head::Global)?;
    let (targets, _) = pretrain_stage(config, tokens, Head::Global, &mut model, &subset, config.pretrain.memorize_epochs)?;
    token_accuracy(config, tokens, Head::Global, &model, &subset, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPretrain,
    NoPosttrain,
    LocalActionSpace,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPretrain, Variant::NoPosttrain, Variant::LocalActionSpace];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "no_pretrain",
            Variant::NoPosttrain => "no_posttrain",
            Variant::LocalActionSpace => "local_action_space",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<(Variant, Evaluation)>,
    /// Mean training-rollout reward per GRPO step, per post-trained variant.
    pub curves: Vec<(Variant, Curve)>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&Evaluation> {
        self.variants.iter().find(|(w, _)| *w == v).map(|(_, e)| e)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("variant,requests,precision,ndcg,map,f1,reward\n");
        for (v, e) in &self.variants {
            s.push_str(&crate::formats::summary_csv_line(v.name(), &e.summary));
        }
        s
    }
}

/// Train and evaluate every variant under the same data, seeds and budgets.
/// The pre-trained global model is shared by `full` and `no_posttrain`.
pub fn run_ablation(
    config: &ExperimentConfig,
    data: &Dataset,
    tokens: &Tokens,
    mut progress: impl FnMut(&str),
) -> CliResult<AblationReport> {
    let steps = config.posttrain.steps;
    let epochs = config.pretrain.epochs;
    let mut variants = Vec::new();
    let mut curves = Vec::new();

    progress("pretrain global");
    let mut pre = new_model(config, tokens, Head::Global)?;
    pretrain_stage(config, tokens, Head::Global, &mut pre, &data.train, epochs)?;
    progress("evaluate no_posttrain");
    variants.push((Variant::NoPosttrain, decode_and_evaluate(config, data, tokens, Head::Global, &pre, &data.test)?));

    progress("posttrain full");
    let mut full = pre.clone();
    let stage = posttrain_stage(config, tokens, Head::Global, &mut full, &data.train, steps, |_, _| {})?;
    curves.push((Variant::Full, stage.curve));
    variants.push((Variant::Full, decode_and_evaluate(config, data, tokens, Head::Global, &full, &data.test)?));

    progress("posttrain no_pretrain");
    let mut raw = new_model(config, tokens, Head::Global)?;
    let stage = posttrain_stage(config, tokens, Head::Global, &mut raw, &data.train, steps, |_, _| {})?;
    curves.push((Variant::NoPretrain, stage.curve));
    variants.push((Variant::NoPretrain, decode_and_evaluate(config, data, tokens, Head::Global, &raw, &data.test)?));

    progress("pretrain + posttrain local_action_space");
    let mut las = new_model(config, tokens, Head::Local)?;
    pretrain_stage(config, tokens, Head::Local, &mut las, &data.train, epochs)?;
    let stage = posttrain_stage(config, tokens, Head::Local, &mut las, &data.train, steps, |_, _| {})?;
    curves.push((Variant::LocalActionSpace, stage.curve));
    variants.push((Variant::LocalActionSpace, decode_and_evaluate(config, data, tokens, Head::Local, &las, &data.test)?));

    variants.sort_by_key(|(v, _)| *v);
    Ok(AblationReport { variants, curves })
}

/// One arm of the cold-start comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartArm {
    pub name: String,
    pub seen: Evaluation,
    pub unseen: Evaluation,
    /// MAP over test requests with at least one masked relevant item.
    pub seen_affected_map: f64,
    pub unseen_affected_map: f64,
}

impl ColdStartArm {
    /// `(seen − unseen) / seen` of MAP over every test request.
    pub fn relative_map_drop(&self) -> f64 {
        relative_drop(self.seen.summary.map_at_k, self.unseen.summary.map_at_k)
    }

    pub fn relative_affected_map_drop(&self) -> f64 {
        relative_drop(self.seen_affected_map, self.unseen_affected_map)
    }
}

fn relative_drop(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        (before - after) / before
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub masked: Vec<ItemId>,
    pub affected_requests: usize,
    pub sid: ColdStartArm,
    pub control: ColdStartArm,
}

/// Training requests with the masked items removed from every log entry
/// and never drawn as negatives.
pub fn masked_train_requests(
    config: &ExperimentConfig,
    data: &Dataset,
    masked: &BTreeSet<ItemId>,
    train_log: &[Interaction],
) -> CliResult<Vec<RerankRequest>> {
    let set = build_requests(&data.corpus, train_log, &config.data.requests, masked)?;
    let (train, _) = split_requests(set.requests, config);
    debug_assert!(train.iter().all(|r| r.candidates.iter().chain(&r.history).all(|i| !masked.contains(i))));
    Ok(train)
}

/// Semantic-ID global model against an atomic-ID local-head control, each
/// trained with and without the masked items; both see the same test
/// requests, which keep the masked items.
pub fn run_coldstart(
    config: &ExperimentConfig,
    data: &Dataset,
    tokens: &Tokens,
    mut progress: impl FnMut(&str),
) -> CliResult<ColdStartReport> {
    let prefer: BTreeSet<ItemId> =
        data.test.iter().flat_map(|r| r.candidates.iter().copied().filter(|&c| r.is_relevant(c))).collect();
    let split = mask_items(&data.corpus, &data.interactions, config.coldstart.mask_fraction, config.coldstart.seed, &prefer)?;
    let masked_train = masked_train_requests(config, data, &split.masked, &split.train)?;
    let affected: Vec<usize> = data
        .test
        .iter()
        .enumerate()
        .filter(|(_, r)| r.candidates.iter().any(|c| split.masked.contains(c) && r.is_relevant(*c)))
        .map(|(i, _)| i)
        .collect();
    let affected_map = |e: &Evaluation| -> f64 {
        if affected.is_empty() {
            return 0.0;
        }
        affected.iter().map(|&i| e.rows[i].1.map_at_k).sum::<f64>() / affected.len() as f64
    };

    let atomic = atomic_tokens(&data.corpus)?;
    let mut arm = |name: &str, tokens: &Tokens, head: Head| -> CliResult<ColdStartArm> {
        let mut evals = Vec::new();
        for (regime, train) in [("seen", &data.train), ("unseen", &masked_train)] {
            progress(&format!("{name} {regime}"));
            let mut model = new_model(config, tokens, head)?;
            pretrain_stage(config, tokens, head, &mut model, train, config.pretrain.epochs)?;
            evals.push(decode_and_evaluate(config, data, tokens, head, &model, &data.test)?);
        }
        let unseen = evals.pop().expect("two regimes");
        let seen = evals.pop().expect("two regimes");
        Ok(ColdStartArm {
            name: name.to_string(),
            seen_affected_map: affected_map(&seen),
            unseen_affected_map: affected_map(&unseen),
            seen,
            unseen,
        })
    };
    let sid = arm("sid_global", tokens, Head::Global)?;
    let control = arm("atomic_local", &atomic, Head::Local)?;
    Ok(ColdStartReport { masked: split.masked.into_iter().collect(), affected_requests: affected.len(), sid, control })
}
