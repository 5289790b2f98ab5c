use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.synthetic.n_items=120",
    "data.synthetic.n_users=12",
    "data.synthetic.n_clusters=4",
    "data.requests.n_candidates=8",
    "data.requests.list_len=3",
    "tokenizer.levels=2",
    "tokenizer.codebook_size=4",
    "tokenizer.iters=10",
    "model.d_model=8",
    "model.n_heads=2",
    "model.n_enc_layers=1",
    "model.n_dec_layers=1",
    "model.d_ff=16",
    "model.history_cap=3",
    "pretrain.samples=4",
    "pretrain.epochs=1",
    "posttrain.steps=2",
    "posttrain.group_size=4",
    "posttrain.batch_size=2",
    "decode.beam=4",
];

fn sidrank(root: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sidrank"));
    cmd.env("SIDRANK_RUN_ROOT", root);
    for o in TINY {
        cmd.args(["--set", o]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = sidrank(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn pipeline(root: &Path) -> PathBuf {
    for cmd in ["gen-data", "tokenize", "pretrain", "posttrain", "decode", "eval"] {
        ok(root, &[cmd]);
    }
    run_dir(root)
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let dir = pipeline(root.path());
    for f in [
        "config.json",
        "manifest.json",
        "tokenizer/codebooks.json",
        "tokenizer/sids.jsonl",
        "checkpoints/pretrain.json",
        "checkpoints/posttrain.json",
        "curves/pretrain_loss.csv",
        "curves/posttrain_reward.csv",
        "decode.jsonl",
        "eval.csv",
        "eval_summary.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let eval = fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert!(eval.starts_with("request_id,precision,ndcg,map,f1,reward\n"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let decode = &manifest["commands"]["decode"];
    assert_eq!(decode["inputs"]["checkpoints/posttrain.json"].as_str().unwrap().len(), 64);
    assert!(decode["outputs"]["decode.jsonl"].is_string());
    assert_eq!(manifest["config"]["data"]["requests"]["list_len"], 3);
    let first = fs::read_to_string(dir.join("decode.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["request_id", "items", "logprob", "beam_rank"] {
        assert!(record.get(key).is_some(), "{key}");
    }
    assert_eq!(record["items"].as_array().unwrap().len(), 3);
}

#[test]
fn rerun_is_a_no_op_unless_forced() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["gen-data"]);
    let dir = run_dir(root.path());
    let stamp = fs::metadata(dir.join("data/items.jsonl")).unwrap().modified().unwrap();
    let again = ok(root.path(), &["gen-data"]);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(fs::metadata(dir.join("data/items.jsonl")).unwrap().modified().unwrap(), stamp);
    let forced = ok(root.path(), &["gen-data", "--force"]);
    assert!(!String::from_utf8_lossy(&forced.stderr).contains("use --force"));
    assert_eq!(run_dir(root.path()), dir);
}

#[test]
fn missing_inputs_name_the_producer() {
    let root = tempfile::tempdir().unwrap();
    let out = sidrank(root.path(), &["tokenize"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sidrank gen-data"));

    ok(root.path(), &["gen-data"]);
    ok(root.path(), &["tokenize"]);
    let out = sidrank(root.path(), &["posttrain"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sidrank pretrain"));
    ok(root.path(), &["posttrain", "--allow-random", "--steps", "1"]);
}

#[test]
fn config_errors_are_listed_together() {
    let root = tempfile::tempdir().unwrap();
    let out = sidrank(root.path(), &["--set", "decode.beam=0", "--set", "posttrain.group_size=1", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("decode.beam") && err.contains("posttrain.group_size"), "{err}");

    let out = sidrank(root.path(), &["--set", "posttrain.groupsize=3", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    let file = root.path().join("bad.json");
    fs::write(&file, r#"{"seed": 3, "extra": true}"#).unwrap();
    let out = sidrank(root.path(), &["--config", file.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_overrides_combine() {
    let root = tempfile::tempdir().unwrap();
    let conf = tempfile::tempdir().unwrap();
    let file = conf.path().join("cfg.json");
    fs::write(&file, r#"{"seed": 3, "posttrain": {"steps": 1, "clip": 0.3}}"#).unwrap();
    ok(root.path(), &["--config", file.to_str().unwrap(), "gen-data"]);
    let dir = run_dir(root.path());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["posttrain"]["clip"], 0.3);
    // --set wins over the file
    assert_eq!(cfg["posttrain"]["steps"], 2);
    assert_eq!(cfg["decode"]["beam"], 4);
}

#[test]
fn variance_lab_writes_the_requested_rows() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(
        root.path(),
        &["variance-lab", "--n", "4", "--samples", "200", "--mode", "absolute", "--labeling", "local", "--row", "4"],
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,mode,labeling,row,samples,total_var,mapping_var,within_var,bound,se,bound_ok");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("4,absolute,local,4,200,"));
    let file = fs::read_to_string(run_dir(root.path()).join("variance.csv")).unwrap();
    assert_eq!(file, csv);

    let out = ok(root.path(), &["variance-lab", "--n", "4", "--samples", "100", "--mode", "setlike", "--labeling", "global"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("4,setlike,global,,100,"));
}

#[test]
fn trie_dump_is_dot() {
    let root = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "tokenize", "pretrain"] {
        ok(root.path(), &[cmd]);
    }
    let dir = run_dir(root.path());
    let test = fs::read_to_string(dir.join("data/test_requests.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    let id = first["request_id"].to_string();
    let out = ok(root.path(), &["decode", "--from", "pretrain", "--dump-trie", &id]);
    let dot = String::from_utf8(out.stdout).unwrap();
    assert!(dot.starts_with("digraph"), "{dot}");
    assert!(!dir.join("decode.jsonl").exists());
}

#[test]
fn identical_configs_give_identical_eval_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = pipeline(a.path());
    let db = pipeline(b.path());
    assert_eq!(fs::read(da.join("eval.csv")).unwrap(), fs::read(db.join("eval.csv")).unwrap());
    assert_eq!(fs::read(da.join("checkpoints/posttrain.json")).unwrap(), fs::read(db.join("checkpoints/posttrain.json")).unwrap());
}

#[test]
fn coldstart_writes_both_regimes_and_a_summary() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["gen-data"]);
    ok(root.path(), &["tokenize"]);
    let out = ok(root.path(), &["coldstart"]);
    let dir = run_dir(root.path());
    for f in ["coldstart/eval_seen.csv", "coldstart/eval_unseen.csv", "coldstart/summary.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("coldstart/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["masked_items"], 6);
    assert_eq!(summary["arms"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("atomic_local_unseen"));
}
