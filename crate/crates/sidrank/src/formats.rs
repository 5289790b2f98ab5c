//! On-disk formats: JSONL records, JSON documents and CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sidrank_core::corpus::{Corpus, Interaction, Item, RerankRequest};
use sidrank_core::eval::{MetricReport, MetricSummary};
use sidrank_core::model::{Head, ModelConfig, ParamStore, RerankerModel};
use sidrank_core::optim::AdamW;
use sidrank_core::tensor::Matrix;
use sidrank_core::tokenizer::{RqCodebooks, SemanticId, SidTable};
use sidrank_core::training::Curve;
use sidrank_core::variance::VarianceRow;
use sidrank_core::ItemId;

use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), line: e.line(), message: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("documents serialize");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// Items JSONL into a validated corpus.
pub fn load_corpus(path: &Path) -> CliResult<Corpus> {
    let items: Vec<Item> = read_jsonl(path)?;
    let mut corpus = Corpus::default();
    for (i, item) in items.into_iter().enumerate() {
        corpus.push(item).map_err(|e| CliError::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
    }
    Ok(corpus)
}

pub fn load_interactions(path: &Path, corpus: &Corpus) -> CliResult<Vec<Interaction>> {
    let log: Vec<Interaction> = read_jsonl(path)?;
    corpus.validate_interactions(&log)?;
    Ok(log)
}

pub fn save_requests(path: &Path, requests: &[RerankRequest]) -> CliResult<()> {
    write_jsonl(path, requests)
}

pub fn load_requests(path: &Path) -> CliResult<Vec<RerankRequest>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SidRecord {
    item_id: ItemId,
    codes: Vec<usize>,
    disamb: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SidHeader {
    depth: usize,
    codebook_size: usize,
}

/// SID table as JSONL; the first line carries depth and codebook size.
pub fn save_sids(path: &Path, table: &SidTable) -> CliResult<()> {
    let mut buf = serde_json::to_vec(&SidHeader { depth: table.depth, codebook_size: table.codebook_size }).unwrap();
    buf.push(b'\n');
    for (item_id, sid) in table.iter() {
        serde_json::to_writer(&mut buf, &SidRecord { item_id, codes: sid.codes.clone(), disamb: sid.disamb }).unwrap();
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn load_sids(path: &Path) -> CliResult<SidTable> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, e: serde_json::Error| CliError::Parse { path: path.into(), line, message: e.to_string() };
    let Some((_, first)) = lines.next() else {
        return Err(CliError::Parse { path: path.into(), line: 1, message: "empty SID table".into() });
    };
    let header: SidHeader = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;
    let mut entries = Vec::new();
    for (i, line) in lines {
        let r: SidRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e))?;
        entries.push((r.item_id, SemanticId { codes: r.codes, disamb: r.disamb }));
    }
    Ok(SidTable::from_entries(header.depth, header.codebook_size, entries)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodebookFile {
    #[serde(rename = "M")]
    m: usize,
    codebook_size: usize,
    #[serde(rename = "D")]
    d: usize,
    levels: Vec<Vec<Vec<f64>>>,
    mean_sq_residual: Vec<f64>,
}

pub fn save_codebooks(path: &Path, cb: &RqCodebooks) -> CliResult<()> {
    let file = CodebookFile {
        m: cb.depth(),
        codebook_size: cb.codebook_size,
        d: cb.dim,
        levels: cb.levels.iter().map(|l| (0..l.rows).map(|r| l.row(r).to_vec()).collect()).collect(),
        mean_sq_residual: cb.mean_sq_residual.clone(),
    };
    write_json(path, &file)
}

pub fn load_codebooks(path: &Path) -> CliResult<RqCodebooks> {
    let f: CodebookFile = read_json(path)?;
    let levels = f
        .levels
        .into_iter()
        .map(|rows| Matrix::from_vec(rows.len(), f.d, rows.into_iter().flatten().collect()))
        .collect();
    Ok(RqCodebooks { codebook_size: f.codebook_size, dim: f.d, levels, mean_sq_residual: f.mean_sq_residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Self-describing model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub head: Head,
    pub init_seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Seed the next training stage derives its streams from.
    pub rng_seed: u64,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn of(model: &RerankerModel, head: Head, optimizer: Option<&AdamW>, rng_seed: u64) -> Self {
        Self {
            config: model.config().clone(),
            head,
            init_seed: model.init_seed(),
            step: optimizer.map_or(0, |o| o.step),
            rng_seed,
            tensors: model
                .params()
                .iter()
                .map(|t| TensorRecord {
                    name: t.name.clone(),
                    shape: [t.value.rows, t.value.cols],
                    data: t.value.data.clone(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn model(&self) -> CliResult<RerankerModel> {
        let mut params = ParamStore::default();
        for t in &self.tensors {
            if t.data.len() != t.shape[0] * t.shape[1] {
                return Err(sidrank_core::Error::Integrity(format!("tensor {} has a wrong element count", t.name)).into());
            }
            params.push(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone()));
        }
        Ok(RerankerModel::from_parts(self.config.clone(), params, self.init_seed)?)
    }
}

pub fn curve_csv(curve: &Curve) -> String {
    let mut s = String::from("step,value\n");
    for (step, v) in &curve.points {
        writeln!(s, "{step},{v}").unwrap();
    }
    s
}

/// One decoded list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub request_id: u64,
    pub items: Vec<ItemId>,
    pub logprob: f64,
    pub beam_rank: usize,
}

pub fn eval_csv(rows: &[(u64, MetricReport, f64)]) -> String {
    let mut s = String::from("request_id,precision,ndcg,map,f1,reward\n");
    for (id, m, reward) in rows {
        writeln!(s, "{id},{},{},{},{},{reward}", m.precision_at_k, m.ndcg_at_k, m.map_at_k, m.f1_at_k).unwrap();
    }
    s
}

pub fn summary_csv_line(label: &str, s: &MetricSummary) -> String {
    format!("{label},{},{},{},{},{},{}\n", s.requests, s.precision_at_k, s.ndcg_at_k, s.map_at_k, s.f1_at_k, s.reward)
}

pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut s = sidrank_core::variance::report_header();
    s.push('\n');
    for r in rows {
        let mode = match r.mode {
            sidrank_core::model::PositionalMode::Absolute => "absolute",
            sidrank_core::model::PositionalMode::SetLike => "setlike",
        };
        let row = r.row.map_or(String::new(), |j| j.to_string());
        writeln!(
            s,
            "{},{mode},{},{row},{},{},{},{},{},{},{}",
            r.n,
            r.labeling.name(),
            r.samples,
            r.total_var,
            r.mapping_var,
            r.within_var,
            r.bound,
            r.se,
            r.bound_ok
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("items.jsonl");
        fs::write(&p, "{\"item_id\":1,\"embedding\":[0.5,1]}\n{\"item_id\":2,\"embedding\":[0.5]}\n").unwrap();
        match load_corpus(&p) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "{\"item_id\":1,\"embedding\":[0.5,1]}\nnot json\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(CliError::Parse { line: 2, .. })));
        fs::write(&p, "").unwrap();
        let c = load_corpus(&p).unwrap();
        assert_eq!((c.len(), c.dim()), (0, None));
    }

    #[test]
    fn sid_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sids.jsonl");
        let table = SidTable::from_entries(
            2,
            4,
            [(3, SemanticId { codes: vec![1, 2], disamb: 0 }), (9, SemanticId { codes: vec![1, 2], disamb: 1 })],
        )
        .unwrap();
        save_sids(&p, &table).unwrap();
        assert_eq!(load_sids(&p).unwrap(), table);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            vocab_size: 12,
            max_enc_len: 20,
            max_dec_len: 4,
            item_token_len: 2,
            ..ModelConfig::default()
        };
        let model = RerankerModel::new(config, 4).unwrap();
        write_json(&p, &Checkpoint::of(&model, Head::Global, None, 9)).unwrap();
        let back: Checkpoint = read_json(&p).unwrap();
        assert_eq!(back.model().unwrap(), model);
    }
}
