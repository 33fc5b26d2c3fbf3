use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn lexmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexmap"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_seed_bank_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(fixtures().join("synthetic/config.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&src).unwrap();
    let base = fixtures().join("synthetic");
    cfg["input_dir"] = base.join("corpus").to_string_lossy().into();
    cfg["anchors"] = base.join("anchors.json").to_string_lossy().into();
    cfg["act_descriptions"] = base.join("act_descriptions.json").to_string_lossy().into();
    cfg["seed_bank"] = "no-such-seeds.json".into();
    let path = tmp.path().join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = lexmap(&["run", "--config", path.to_str().unwrap(), "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-seeds.json"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(lexmap(&["fit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.jsonl");
    fs::write(&corpus, "{not json\n").unwrap();
    let out = lexmap(&["stats", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stepwise_verbs_reproduce_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let at = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let syn = fixtures().join("synthetic");
    let golden = fixtures().join("golden");

    let ok = |o: Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(lexmap(&["ingest", "--in", syn.join("corpus").to_str().unwrap(), "--out", &at("corpus.jsonl")]));
    assert_eq!(fs::read(at("corpus.jsonl")).unwrap(), fs::read(golden.join("corpus.jsonl")).unwrap());

    let stats = ok(lexmap(&["stats", &at("corpus.jsonl")]));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(stats["case_count"], 384);

    ok(lexmap(&[
        "map",
        "--corpus",
        &at("corpus.jsonl"),
        "--seeds",
        syn.join("seeds.json").to_str().unwrap(),
        "--out",
        &at("assignments.jsonl"),
        "--proportions",
        &at("props.jsonl"),
        "--dim",
        "256",
        "--model-id",
        "hashing-256",
    ]));
    assert_eq!(fs::read(at("props.jsonl")).unwrap(), fs::read(golden.join("props.jsonl")).unwrap());

    ok(lexmap(&["fit", "--proportions", &at("props.jsonl"), "--out", &at("cells.csv")]));
    assert_eq!(fs::read(at("cells.csv")).unwrap(), fs::read(golden.join("cells.csv")).unwrap());

    ok(lexmap(&["align", "--cells", &at("cells.csv"), "--proportions", &at("props.jsonl"), "--out", &at("categories.csv")]));
    assert_eq!(fs::read(at("categories.csv")).unwrap(), fs::read(golden.join("categories.csv")).unwrap());
}
