//! Command-line surface: argument parsing and one function per command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sidrank_core::corpus::{Interaction, RerankRequest};
use sidrank_core::decode::prepare;
use sidrank_core::variance::{estimate_variance, Labeling, VarianceLab, VarianceRow};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{
    curve_csv, eval_csv, load_codebooks, load_corpus, load_interactions, load_requests, load_sids, read_json,
    read_jsonl, save_codebooks, save_requests, save_sids, summary_csv_line, variance_csv, write_bytes, write_json,
    write_jsonl, Checkpoint, DecodeRecord,
};
use crate::pipeline::{self, Dataset, Tokens};
use crate::run::{files, run_root, Run};

#[derive(Debug, Parser)]
#[command(name = "sidrank", about = "Generative list reranking over semantic item IDs")]
pub struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set posttrain.group_size=8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or import) the corpus and cut train/test requests.
    GenData,
    /// Fit residual k-means codebooks and assign semantic IDs.
    Tokenize,
    /// Next-token pre-training on oracle-selected target lists.
    Pretrain,
    /// GRPO post-training from the pre-trained checkpoint.
    Posttrain(PosttrainArgs),
    /// Trie-constrained beam search over the test requests.
    Decode(DecodeArgs),
    /// Score decoded lists.
    Eval,
    /// Monte Carlo gradient-variance probes on a toy reranker.
    VarianceLab(VarianceArgs),
    /// Train and evaluate the ablation variants.
    Ablation,
    /// Seen versus unseen items with a fraction of the catalog masked.
    Coldstart,
}

#[derive(Debug, Args, Default)]
pub struct PosttrainArgs {
    /// Start from a random model when no pre-trained checkpoint exists.
    #[arg(long)]
    pub allow_random: bool,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Stage {
    Pretrain,
    #[default]
    Posttrain,
}

#[derive(Debug, Args, Default)]
pub struct DecodeArgs {
    /// Which checkpoint to decode with.
    #[arg(long, value_enum, default_value_t = Stage::Posttrain)]
    pub from: Stage,
    /// Print the candidate trie of this test request in dot format.
    #[arg(long, value_name = "REQUEST_ID")]
    pub dump_trie: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Absolute,
    Setlike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelingArg {
    Local,
    Global,
}

#[derive(Debug, Args, Default)]
pub struct VarianceArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub labeling: Option<LabelingArg>,
    /// 1-based output row for local labeling.
    #[arg(long)]
    pub row: Option<usize>,
    /// Rescale every hidden state to unit norm.
    #[arg(long)]
    pub unit_norm: bool,
}

/// Resolve the configuration from file, overrides and defaults.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::from_json(&crate::formats::read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(overrides)?.validated()
}

/// Parse-free entry point; returns the process exit status.
pub fn execute(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let config = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    let mut run = Run::open(&run_root(), config)?;
    eprintln!("run directory {}", run.dir.display());
    let force = cli.force;
    match cli.command {
        Command::GenData => gen_data(&mut run, force),
        Command::Tokenize => tokenize(&mut run, force),
        Command::Pretrain => pretrain(&mut run, force),
        Command::Posttrain(a) => posttrain(&mut run, force, &a),
        Command::Decode(a) => decode(&mut run, force, &a),
        Command::Eval => eval(&mut run, force),
        Command::VarianceLab(a) => variance_lab(&mut run, force, &a),
        Command::Ablation => ablation(&mut run, force),
        Command::Coldstart => coldstart(&mut run, force),
    }
}

fn skip(run: &Run, command: &str, outputs: &[&str], args: &[String], force: bool) -> bool {
    let done = !force && run.is_done(command, outputs, args);
    if done {
        eprintln!("{command}: outputs exist for this configuration; use --force to recompute");
    }
    done
}

pub fn gen_data(run: &mut Run, force: bool) -> CliResult<()> {
    let outputs = [files::ITEMS, files::INTERACTIONS, files::PREFERENCES, files::TRAIN, files::TEST];
    let mut args = Vec::new();
    if let (Some(i), Some(l)) = (&run.config.data.items_path, &run.config.data.interactions_path) {
        args.push(format!("items_path sha256={}", crate::run::sha256_file(i.as_ref())?));
        args.push(format!("interactions_path sha256={}", crate::run::sha256_file(l.as_ref())?));
    }
    if skip(run, "gen-data", &outputs, &args, force) {
        return Ok(());
    }
    let data = pipeline::build_dataset(&run.config)?;
    write_jsonl(&run.path(files::ITEMS), data.corpus.items())?;
    write_jsonl(&run.path(files::INTERACTIONS), &data.interactions)?;
    write_json(&run.path(files::PREFERENCES), &data.preferences)?;
    save_requests(&run.path(files::TRAIN), &data.train)?;
    save_requests(&run.path(files::TEST), &data.test)?;
    eprintln!(
        "gen-data: {} items, {} interactions, {} train / {} test requests ({} windows skipped)",
        data.corpus.len(),
        data.interactions.len(),
        data.train.len(),
        data.test.len(),
        data.skipped
    );
    run.record("gen-data", &[], &outputs, args)
}

/// Dataset written by `gen-data`.
pub fn load_dataset(run: &Run) -> CliResult<Dataset> {
    let corpus = load_corpus(&run.require(files::ITEMS, "gen-data")?)?;
    let interactions: Vec<Interaction> = load_interactions(&run.require(files::INTERACTIONS, "gen-data")?, &corpus)?;
    let preferences: BTreeMap<u64, Vec<f64>> = read_json(&run.require(files::PREFERENCES, "gen-data")?)?;
    let train: Vec<RerankRequest> = load_requests(&run.require(files::TRAIN, "gen-data")?)?;
    let test = load_requests(&run.require(files::TEST, "gen-data")?)?;
    Ok(Dataset { corpus, interactions, preferences, train, test, skipped: 0 })
}

pub fn tokenize(run: &mut Run, force: bool) -> CliResult<()> {
    let outputs = [files::CODEBOOKS, files::SIDS];
    if skip(run, "tokenize", &outputs, &[], force) {
        return Ok(());
    }
    let corpus = load_corpus(&run.require(files::ITEMS, "gen-data")?)?;
    let tokens = pipeline::tokenize(&run.config, &corpus)?;
    save_codebooks(&run.path(files::CODEBOOKS), tokens.codebooks.as_ref().expect("fitted codebooks"))?;
    save_sids(&run.path(files::SIDS), &tokens.table)?;
    eprintln!(
        "tokenize: {} items, {} collisions, item token length {}, vocabulary {}",
        tokens.table.len(),
        tokens.table.collision_count(),
        tokens.vocab.item_token_len(),
        tokens.vocab.size()
    );
    run.record("tokenize", &[files::ITEMS], &outputs, Vec::new())
}

pub fn load_tokens(run: &Run) -> CliResult<Tokens> {
    let table = load_sids(&run.require(files::SIDS, "tokenize")?)?;
    let codebooks = load_codebooks(&run.require(files::CODEBOOKS, "tokenize")?)?;
    Ok(Tokens::from_table(table, Some(codebooks)))
}

pub fn pretrain(run: &mut Run, force: bool) -> CliResult<()> {
    let outputs = [files::PRETRAIN_CKPT, files::PRETRAIN_CURVE];
    if skip(run, "pretrain", &outputs, &[], force) {
        return Ok(());
    }
    let data = load_dataset(run)?;
    let tokens = load_tokens(run)?;
    let cfg = &run.config;
    let head = cfg.model.head;
    let mut model = pipeline::new_model(cfg, &tokens, head)?;
    let (_, stage) = pipeline::pretrain_stage(cfg, &tokens, head, &mut model, &data.train, cfg.pretrain.epochs)?;
    if let Some(last) = stage.curve.points.last() {
        eprintln!("pretrain: {} steps, final loss {:.4}", last.0, last.1);
    }
    write_json(&run.path(files::PRETRAIN_CKPT), &Checkpoint::of(&model, head, Some(&stage.optimizer), cfg.pretrain.seed))?;
    write_bytes(&run.path(files::PRETRAIN_CURVE), curve_csv(&stage.curve).as_bytes())?;
    run.record("pretrain", &[files::TRAIN, files::SIDS], &outputs, Vec::new())
}

fn posttrain_overrides(a: &PosttrainArgs) -> Vec<String> {
    let mut o = Vec::new();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("posttrain.{key}={v}"));
        }
    };
    push("group_size", a.group_size.map(|v| v.to_string()));
    push("temperature", a.temperature.map(|v| v.to_string()));
    push("beta", a.beta.map(|v| v.to_string()));
    push("clip", a.clip.map(|v| v.to_string()));
    push("lr", a.lr.map(|v| v.to_string()));
    push("steps", a.steps.map(|v| v.to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    o
}

pub fn posttrain(run: &mut Run, force: bool, a: &PosttrainArgs) -> CliResult<()> {
    let outputs = [files::POSTTRAIN_CKPT, files::POSTTRAIN_CURVE];
    let mut args = posttrain_overrides(a);
    let cfg = run.config.with_overrides(&args)?.validated()?;
    let ckpt_path = run.path(files::PRETRAIN_CKPT);
    let from_random = !ckpt_path.exists();
    if from_random && !a.allow_random {
        return Err(CliError::MissingInput { path: ckpt_path, producer: "pretrain" });
    }
    if from_random {
        args.push("allow_random".into());
    }
    if skip(run, "posttrain", &outputs, &args, force) {
        return Ok(());
    }
    let data = load_dataset(run)?;
    let tokens = load_tokens(run)?;
    let head = cfg.model.head;
    let (mut model, mut inputs) = if from_random {
        (pipeline::new_model(&cfg, &tokens, head)?, vec![files::TRAIN, files::SIDS])
    } else {
        let ckpt: Checkpoint = read_json(&ckpt_path)?;
        if ckpt.head != head {
            return Err(CliError::Config(vec![format!("pre-trained checkpoint uses the {:?} head, config asks for {head:?}", ckpt.head)]));
        }
        (ckpt.model()?, vec![files::TRAIN, files::SIDS, files::PRETRAIN_CKPT])
    };
    inputs.sort();
    let stage = pipeline::posttrain_stage(&cfg, &tokens, head, &mut model, &data.train, cfg.posttrain.steps, |step, reward| {
        if step % 10 == 0 {
            eprintln!("posttrain: step {step} mean rollout reward {reward:.4}");
        }
    })?;
    write_json(&run.path(files::POSTTRAIN_CKPT), &Checkpoint::of(&model, head, Some(&stage.optimizer), cfg.posttrain.seed))?;
    write_bytes(&run.path(files::POSTTRAIN_CURVE), curve_csv(&stage.curve).as_bytes())?;
    run.record("posttrain", &inputs, &outputs, args)
}

pub fn decode(run: &mut Run, force: bool, a: &DecodeArgs) -> CliResult<()> {
    let (ckpt_rel, producer) = match a.from {
        Stage::Pretrain => (files::PRETRAIN_CKPT, "pretrain"),
        Stage::Posttrain => (files::POSTTRAIN_CKPT, "posttrain"),
    };
    let ckpt: Checkpoint = read_json(&run.require(ckpt_rel, producer)?)?;
    let tokens = load_tokens(run)?;
    let test = load_requests(&run.require(files::TEST, "gen-data")?)?;
    let model = ckpt.model()?;
    if let Some(id) = a.dump_trie {
        let Some(r) = test.iter().find(|r| r.request_id == id) else {
            return Err(CliError::Config(vec![format!("no test request with id {id}")]));
        };
        let p = prepare(ckpt.head, r, &tokens.table, &tokens.vocab, run.config.model.history_cap, model.config().max_enc_len)?;
        print!("{}", p.trie.to_dot(&p.trie.new_state()));
        return Ok(());
    }
    let outputs = [files::DECODE];
    let args = vec![format!("from={producer}")];
    if skip(run, "decode", &outputs, &args, force) {
        return Ok(());
    }
    let decoded: Vec<DecodeRecord> =
        pipeline::decode_all(&run.config, &tokens, ckpt.head, &model, &test)?.into_iter().flatten().collect();
    write_jsonl(&run.path(files::DECODE), &decoded)?;
    eprintln!("decode: {} lists for {} requests", decoded.len(), test.len());
    run.record("decode", &[ckpt_rel, files::SIDS, files::TEST], &outputs, args)
}

pub fn eval(run: &mut Run, force: bool) -> CliResult<()> {
    let outputs = [files::EVAL, files::EVAL_SUMMARY];
    if skip(run, "eval", &outputs, &[], force) {
        return Ok(());
    }
    let decoded: Vec<DecodeRecord> = read_jsonl(&run.require(files::DECODE, "decode")?)?;
    let data = load_dataset(run)?;
    let e = pipeline::evaluate(&run.config, &data, &data.test, &decoded)?;
    write_bytes(&run.path(files::EVAL), eval_csv(&e.rows).as_bytes())?;
    write_json(&run.path(files::EVAL_SUMMARY), &EvalSummary { summary: e.summary, simulated_reward: e.simulated })?;
    let s = &e.summary;
    eprintln!(
        "eval: {} requests, P {:.4} NDCG {:.4} MAP {:.4} F1 {:.4} reward {:.4}",
        s.requests, s.precision_at_k, s.ndcg_at_k, s.map_at_k, s.f1_at_k, s.reward
    );
    run.record("eval", &[files::DECODE, files::TEST, files::PREFERENCES], &outputs, Vec::new())
}

#[derive(Debug, serde::Serialize)]
struct EvalSummary {
    summary: sidrank_core::eval::MetricSummary,
    simulated_reward: Option<f64>,
}

fn variance_overrides(a: &VarianceArgs) -> Vec<String> {
    let mut o = Vec::new();
    if let Some(n) = a.n {
        o.push(format!("variance.n=[{n}]"));
    }
    if let Some(s) = a.samples {
        o.push(format!("variance.samples={s}"));
    }
    if let Some(m) = a.mode {
        o.push(format!("variance.modes=[\"{}\"]", if m == ModeArg::Absolute { "absolute" } else { "set_like" }));
    }
    if let Some(l) = a.labeling {
        o.push(format!("variance.labelings=[\"{}\"]", if l == LabelingArg::Local { "local" } else { "global" }));
    }
    if let Some(r) = a.row {
        o.push(format!("variance.rows=[{r}]"));
    }
    if a.unit_norm {
        o.push("variance.unit_norm=true".into());
    }
    o
}

/// Every (N, mode, labeling, row) combination of the variance section.
pub fn variance_rows(cfg: &ExperimentConfig) -> CliResult<Vec<VarianceRow>> {
    let v = &cfg.variance;
    let mut rows = Vec::new();
    for &n in &v.n {
        for &mode in &v.modes {
            let lab = VarianceLab::new(n, mode, &v.lab)?;
            let probes = lab.probes(0, v.samples, v.unit_norm, v.seed ^ n as u64)?;
            for &labeling in &v.labelings {
                match labeling {
                    Labeling::Global => rows.push(VarianceRow::of(mode, &estimate_variance(&probes, labeling, None)?)),
                    Labeling::Local => {
                        let mut which: Vec<usize> = if v.rows.is_empty() { vec![1, n] } else { v.rows.clone() };
                        which.dedup();
                        for row in which {
                            if row == 0 || row > n {
                                return Err(CliError::Config(vec![format!("variance row {row} is outside 1..={n}")]));
                            }
                            rows.push(VarianceRow::of(mode, &estimate_variance(&probes, labeling, Some(row))?));
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn variance_lab(run: &mut Run, force: bool, a: &VarianceArgs) -> CliResult<()> {
    let args = variance_overrides(a);
    let cfg = run.config.with_overrides(&args)?.validated()?;
    let outputs = [files::VARIANCE];
    if skip(run, "variance-lab", &outputs, &args, force) {
        return Ok(());
    }
    let rows = variance_rows(&cfg)?;
    let csv = variance_csv(&rows);
    write_bytes(&run.path(files::VARIANCE), csv.as_bytes())?;
    print!("{csv}");
    run.record("variance-lab", &[], &outputs, args)
}

pub fn ablation(run: &mut Run, force: bool) -> CliResult<()> {
    let outputs = [files::ABLATION, files::ABLATION_SUMMARY];
    if skip(run, "ablation", &outputs, &[], force) {
        return Ok(());
    }
    let data = load_dataset(run)?;
    let tokens = load_tokens(run)?;
    let report = pipeline::run_ablation(&run.config, &data, &tokens, |s| eprintln!("ablation: {s}"))?;
    let table = report.table();
    write_bytes(&run.path(files::ABLATION), table.as_bytes())?;
    write_json(&run.path(files::ABLATION_SUMMARY), &report)?;
    print!("{table}");
    run.record("ablation", &[files::TRAIN, files::TEST, files::SIDS], &outputs, Vec::new())
}

pub fn coldstart(run: &mut Run, force: bool) -> CliResult<()> {
    let outputs = [files::COLDSTART_SEEN, files::COLDSTART_UNSEEN, files::COLDSTART_SUMMARY];
    if skip(run, "coldstart", &outputs, &[], force) {
        return Ok(());
    }
    let data = load_dataset(run)?;
    let tokens = load_tokens(run)?;
    let report = pipeline::run_coldstart(&run.config, &data, &tokens, |s| eprintln!("coldstart: {s}"))?;
    write_bytes(&run.path(files::COLDSTART_SEEN), eval_csv(&report.sid.seen.rows).as_bytes())?;
    write_bytes(&run.path(files::COLDSTART_UNSEEN), eval_csv(&report.sid.unseen.rows).as_bytes())?;
    write_json(&run.path(files::COLDSTART_SUMMARY), &ColdStartSummary::of(&report))?;
    let mut table = String::from("arm,requests,precision,ndcg,map,f1,reward\n");
    for arm in [&report.sid, &report.control] {
        table.push_str(&summary_csv_line(&format!("{}_seen", arm.name), &arm.seen.summary));
        table.push_str(&summary_csv_line(&format!("{}_unseen", arm.name), &arm.unseen.summary));
    }
    print!("{table}");
    eprintln!(
        "coldstart: relative MAP drop sid {:.4}, control {:.4}",
        report.sid.relative_map_drop(),
        report.control.relative_map_drop()
    );
    run.record("coldstart", &[files::TRAIN, files::TEST, files::INTERACTIONS, files::SIDS], &outputs, Vec::new())
}

/// Seen/unseen deltas of both arms.
#[derive(Debug, serde::Serialize)]
pub struct ColdStartSummary {
    pub masked_items: usize,
    pub affected_requests: usize,
    pub arms: Vec<ArmDelta>,
}

#[derive(Debug, serde::Serialize)]
pub struct ArmDelta {
    pub arm: String,
    pub seen_map: f64,
    pub unseen_map: f64,
    pub relative_map_drop: f64,
    pub seen_affected_map: f64,
    pub unseen_affected_map: f64,
    pub relative_affected_map_drop: f64,
}

impl ColdStartSummary {
    pub fn of(r: &pipeline::ColdStartReport) -> Self {
        let delta = |a: &pipeline::ColdStartArm| ArmDelta {
            arm: a.name.clone(),
            seen_map: a.seen.summary.map_at_k,
            unseen_map: a.unseen.summary.map_at_k,
            relative_map_drop: a.relative_map_drop(),
            seen_affected_map: a.seen_affected_map,
            unseen_affected_map: a.unseen_affected_map,
            relative_affected_map_drop: a.relative_affected_map_drop(),
        };
        Self { masked_items: r.masked.len(), affected_requests: r.affected_requests, arms: vec![delta(&r.sid), delta(&r.control)] }
    }
}
