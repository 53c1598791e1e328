//! Command behaviour and exit codes of the `df` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value as Json};

struct Ws {
    dir: tempfile::TempDir,
}

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Ws {
    /// A catalog with `raw` built from two 40-member shards.
    fn new() -> Ws {
        let ws = Ws {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.ok(&["fixture", "--out", &ws.path("data"), "--shards", "2", "--members", "40"]);
        ws.ok(&["init", &ws.path("cat")]);
        ws.ok(&[
            "etl",
            "--archive",
            &ws.path("data/shard-000.tar"),
            &ws.path("data/shard-001.tar"),
            "--sidecar",
            &ws.path("data/{stem}.jsonl"),
            "--save",
            "raw",
        ]);
        ws
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn df(&self, args: &[&str]) -> Out {
        let out = Command::new(env!("CARGO_BIN_EXE_df"))
            .arg("--root")
            .arg(self.dir.path().join("cat"))
            .args(args)
            .env("DF_CACHE_DIR", self.dir.path().join("cache"))
            .env_remove("DF_SHARED_CACHE_DIR")
            .env_remove("DF_CACHE_MAX_BYTES")
            .output()
            .unwrap();
        Out {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    fn ok(&self, args: &[&str]) -> Json {
        let mut full = vec!["--json"];
        full.extend_from_slice(args);
        let out = self.df(&full);
        assert_eq!(out.code, 0, "df {args:?}: {}", out.stderr);
        serde_json::from_str(&out.stdout).unwrap_or_else(|e| panic!("df {args:?}: {e}: {}", out.stdout))
    }

    fn code(&self, args: &[&str]) -> (i32, String) {
        let out = self.df(args);
        (out.code, out.stderr)
    }
}

#[test]
fn exit_codes_by_error_class() {
    let ws = Ws::new();
    let (code, err) = ws.code(&["query", "raw", "--filter", "size >", "--save", "x"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("syntax error at byte 6"), "{err}");
    let (code, err) = ws.code(&["query", "raw", "--filter", "nope > 1"]);
    assert_eq!((code, err.contains("unknown column")), (2, true), "{err}");
    assert_eq!(ws.code(&["show", "missing"]).0, 2);
    assert_eq!(ws.code(&["show", "raw@7"]).0, 2);
    assert_eq!(ws.code(&["init", &ws.path("cat")]).0, 2);
    assert_eq!(ws.code(&["frobnicate"]).0, 2);
    let (code, err) = ws.code(&["mutate", "raw", "--set", "size2 = caption * 2"]);
    assert_eq!(code, 2, "{err}");
    // Data errors: a UDF crash.
    let cmd = format!("{} echo-udf --mode crash-mid --after 0", env!("CARGO_BIN_EXE_df"));
    let (code, err) = ws.code(&["enrich", "raw", "--udf", "e", "--cmd", &cmd, "--out", "len:int64", "--save", "e"]);
    assert_eq!(code, 3, "{err}");
    // I/O: a missing archive and a missing catalog.
    let (code, err) = ws.code(&["etl", "--archive", &ws.path("nope.tar"), "--save", "n"]);
    assert_eq!(code, 4, "{err}");
    let out = Command::new(env!("CARGO_BIN_EXE_df"))
        .args(["--root", &ws.path("elsewhere"), "ls"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn saves_are_idempotent_and_listed() {
    let ws = Ws::new();
    let again = ws.ok(&[
        "etl",
        "--archive",
        &ws.path("data/shard-000.tar"),
        &ws.path("data/shard-001.tar"),
        "--sidecar",
        &ws.path("data/{stem}.jsonl"),
        "--save",
        "raw",
    ]);
    assert_eq!((again["version"].clone(), again["created"].clone()), (json!(1), json!(false)));
    let q1 = ws.ok(&["query", "raw", "--filter", "size > 1000", "--save", "large"]);
    let q2 = ws.ok(&["query", "raw", "--filter", "(size>1000)", "--save", "large"]);
    assert_eq!(q1["fingerprint"], q2["fingerprint"]);
    assert_eq!(q2["created"], json!(false));
    ws.ok(&["query", "raw", "--filter", "size > 2000", "--save", "large"]);
    let ls = ws.ok(&["ls"]);
    let names: Vec<(&str, usize)> = ls
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["name"].as_str().unwrap(), e["versions"].as_array().unwrap().len()))
        .collect();
    assert_eq!(names, [("large", 2), ("raw", 1)]);

    let log = ws.ok(&["log", "large"]);
    let versions: Vec<u64> = log["versions"].as_array().unwrap().iter().map(|v| v["version"].as_u64().unwrap()).collect();
    assert_eq!(versions, [2, 1]);
    let lineage: Vec<&str> = log["lineage"].as_array().unwrap().iter().map(|n| n["ref"].as_str().unwrap()).collect();
    assert_eq!(lineage, ["large.v2", "raw.v1"]);
}

#[test]
fn empty_catalog_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("c");
    let df = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_df"))
            .arg("--root")
            .arg(&root)
            .args(args)
            .output()
            .unwrap()
    };
    assert!(df(&["init"]).status.success());
    let out = df(&["--json", "ls"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "[]");
    let out = df(&["--json", "stale"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "[]");
}

#[test]
fn show_summarizes_refs_and_truncates_vectors() {
    let ws = Ws::new();
    ws.ok(&["enrich", "raw", "--udf", "hist_embed", "--save", "emb"]);
    let out = ws.df(&["show", "emb", "--head", "3"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.contains("embed                fvec(256)?"), "{}", out.stdout);
    assert!(out.stdout.contains("(dim 256)"));
    assert!(out.stdout.contains("s000_00000.jpg@512+"), "{}", out.stdout);
    let table: Vec<&str> = out.stdout.lines().skip_while(|l| !l.starts_with("_uid ")).collect();
    assert_eq!(table.len(), 4, "{}", out.stdout);
    assert!(!table[0].contains("_ref.offset"));

    let doc = ws.ok(&["show", "emb", "--head", "2"]);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 2);
    assert_eq!(doc["rows"][0]["embed"].as_array().unwrap().len(), 256);
    assert!(doc["rows"][0]["_ref"].as_str().unwrap().starts_with("s000_00000.jpg@512+"));
}

#[test]
fn sort_orders_and_limits() {
    let ws = Ws::new();
    let asc = ws.ok(&["sort", "raw", "--by", "size", "--limit", "5", "--head", "5"]);
    let desc = ws.ok(&["sort", "raw", "--by", "size", "--desc", "--limit", "5", "--head", "5"]);
    let sizes = |d: &Json| -> Vec<i64> { d["rows"].as_array().unwrap().iter().map(|r| r["size"].as_i64().unwrap()).collect() };
    let (a, d) = (sizes(&asc), sizes(&desc));
    assert_eq!(asc["row_count"], json!(5));
    assert!(a.windows(2).all(|w| w[0] <= w[1]), "{a:?}");
    assert!(d.windows(2).all(|w| w[0] >= w[1]), "{d:?}");
    assert!(a[4] <= d[4]);
}

#[test]
fn params_from_files_and_embed_file() {
    let ws = Ws::new();
    ws.ok(&["enrich", "raw", "--udf", "hist_embed", "--save", "emb"]);
    let sample = ws.path("sample.bin");
    fs::write(&sample, vec![7u8; 3000]).unwrap();
    let vec = ws.path("vec.json");
    let written = ws.ok(&["embed-file", &sample, "--udf", "hist_embed", "--out", &vec]);
    assert_eq!(written["type"], json!("fvec(256)"));
    let v: Vec<f64> = serde_json::from_str(&fs::read_to_string(&vec).unwrap()).unwrap();
    assert_eq!(v.len(), 256);
    assert_eq!(v[7], 1.0);
    let scored = ws.ok(&[
        "mutate",
        "emb",
        "--set",
        "d = cos_dist(embed, @t)",
        "--param",
        &format!("t=@{vec}"),
        "--save",
        "scored",
    ]);
    assert_eq!(scored["row_count"], json!(80));
    // A parameter of the wrong dimension is a user error.
    fs::write(&vec, "[1, 2, 3]").unwrap();
    let (code, err) = ws.code(&["mutate", "emb", "--set", "d = cos_dist(embed, @t)", "--param", &format!("t=@{vec}")]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn union_gc_and_stale() {
    let ws = Ws::new();
    ws.ok(&["query", "raw", "--filter", "size > 2000", "--save", "big"]);
    ws.ok(&["query", "raw", "--filter", "size <= 2000", "--save", "rest"]);
    let all = ws.ok(&["union", "big", "rest", "--save", "all"]);
    assert_eq!(all["row_count"], json!(80));
    ws.ok(&["query", "raw", "--filter", "size > 100", "--save", "scratch"]);
    let freed = ws.ok(&["gc", "--keep", "all"]);
    assert!(freed["bytes_freed"].as_u64().unwrap() > 0);
    let names: Vec<String> = ws.ok(&["ls"]).as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["all", "big", "raw", "rest"]);

    // A new raw version makes its descendants stale, parents first.
    ws.ok(&["etl", "--archive", &ws.path("data/shard-000.tar"), "--sidecar", &ws.path("data/shard-000.jsonl"), "--save", "raw"]);
    let stale = ws.ok(&["stale"]);
    assert_eq!(stale, json!(["big", "rest", "all"]));
}

#[test]
fn fetch_is_warm_the_second_time_and_export_feeds_it() {
    let ws = Ws::new();
    let cold = ws.ok(&["fetch", "raw", "--out", &ws.path("f1")]);
    assert!(cold["get_count"].as_u64().unwrap() >= 1);
    let warm = ws.ok(&["fetch", "raw", "--out", &ws.path("f2")]);
    assert_eq!(warm["get_count"], json!(0));
    assert_eq!(warm["cache"]["local_hits"], json!(80));

    let manifest = ws.path("export.jsonl");
    ws.ok(&["export", "raw", "--columns", "size", "--seed", "3", "--world", "4", "--rank", "2", "--out", &manifest]);
    let out = ws.ok(&["fetch", &manifest, "--out", &ws.path("f3")]);
    assert_eq!(out["rows"], json!(20));
    assert_eq!(out["get_count"], json!(0));
    let index = fs::read_to_string(PathBuf::from(ws.path("f3")).join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 20);

    // Without --out, the manifest goes to stdout.
    let printed = ws.df(&["export", "raw", "--columns", "size", "--seed", "3", "--world", "4", "--rank", "2"]);
    assert_eq!(printed.stdout, fs::read_to_string(&manifest).unwrap());
    let (code, err) = ws.code(&["export", "raw", "--columns", "size", "--rank", "4", "--world", "4"]);
    assert_eq!(code, 2, "{err}");
    let (code, _) = ws.code(&["export", "raw", "--columns", "nope"]);
    assert_eq!(code, 2);
}

fn write_pipeline(ws: &Ws, filter: &str) -> String {
    let text = format!(
        r#"{{"pipeline_version": 1, "stages": [
  {{"save_as": "raw", "op": "etl", "sources": [{{"archive": "data/shard-*.tar", "sidecar": "data/{{stem}}.jsonl"}}]}},
  {{"save_as": "large", "op": "filter", "inputs": ["raw"], "expr": "{filter}"}},
  {{"save_as": "sized", "op": "add_signals", "inputs": ["large"], "udf": {{"id": "byte_len"}}}}
]}}"#
    );
    let path = ws.path("pipeline.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_reports_stages_and_fails_with_the_stage_error() {
    let ws = Ws::new();
    let p = write_pipeline(&ws, "size > 1000");
    let first = ws.ok(&["run", &p]);
    let statuses: Vec<&str> = first["stages"].as_array().unwrap().iter().map(|s| s["status"].as_str().unwrap()).collect();
    // `raw` already exists with the same definition.
    assert_eq!(statuses, ["skipped", "executed", "executed"]);
    let second = ws.ok(&["run", &p]);
    assert!(second["stages"].as_array().unwrap().iter().all(|s| s["status"] == "skipped"));
    let text = ws.df(&["run", &p]);
    assert!(text.stdout.lines().all(|l| l.contains("skipped v")), "{}", text.stdout);

    write_pipeline(&ws, "nope > 1");
    let out = ws.df(&["--json", "run", &p]);
    assert_eq!(out.code, 2, "{}", out.stderr);
    let report: Json = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(report["ok"], json!(false));
    assert_eq!(report["stages"][1]["status"], json!("failed"));
    assert_eq!(report["stages"][2]["blocked_by"], json!("large"));
    assert!(Path::new(&ws.path("cat/datasets/large/v2")).exists() == false);
}
