// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use mechuq::detect::HeadRanking;
use mechuq::eval::EvalReport;
use mechuq::uq::scores_from_csv;

fn mechuq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechuq"))
        .current_dir(dir)
        .env_remove("MECHUQ_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mechuq(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn detect_score_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["toy", "--kind", "composite", "--d-model", "165", "-o", "m.json", "--info", "info.json"]);
    ok(d, &["detect-heads", "--model", "m.json", "--L", "50", "--trials", "16", "--top-k", "5", "--seed", "42", "-o", "heads.json"]);
    let heads = HeadRanking::load(d.join("heads.json")).unwrap();
    assert_eq!(heads.entries.len(), 5);
    let info = json(&d.join("info.json"));
    let mut wired: Vec<String> = info["extra_induction_heads"]
        .as_array()
        .unwrap()
        .iter()
        .chain([&info["induction_head"]])
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let mut top: Vec<String> = heads.entries.iter().map(|e| e.id().to_string()).collect();
    wired.sort();
    top.sort();
    assert_eq!(top, wired);

    ok(d, &["synth", "--model", "m.json", "--grounded", "20", "--hallucinated", "20", "-o", "traces"]);
    ok(d, &[
        "score", "--traces", "traces", "--heads", "heads.json", "--k", "1",
        "--method", "intrygue-minmax,max_entropy,ln_entropy,max_prob,perplexity", "-o", "scores.csv",
    ]);
    let rows = scores_from_csv(&std::fs::read_to_string(d.join("scores.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 200);
    ok(d, &["eval", "--scores", "scores.csv", "-o", "eval.json"]);
    let report = EvalReport::from_json(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.methods.len(), 5);
    assert_eq!(report.n_items, 40);
    assert!(report.methods.values().all(|m| m.test_auroc.len() == 5));
}

#[test]
fn ablating_the_induction_head_raises_nll() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["toy", "-o", "m.json", "--info", "info.json"]);
    ok(d, &["synth", "--model", "m.json", "--grounded", "4", "--hallucinated", "4", "-o", "traces"]);
    ok(d, &["means", "--model", "m.json", "--reference", "traces", "-o", "means.json"]);
    let head = json(&d.join("info.json"))["induction_head"].as_str().unwrap().to_string();
    let grounded = std::fs::read_dir(d.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| json(p)["label"] == 0)
        .unwrap();
    let input = grounded.to_str().unwrap();
    ok(d, &["ablate", "--model", "m.json", "--means", "means.json", "--heads", &head, "--input", input, "-o", "delta.json"]);
    let r = json(&d.join("delta.json"));
    assert!(r["nll_post"].as_f64().unwrap() > r["nll_pre"].as_f64().unwrap());
    let out = mechuq(d, &["ablate", "--model", "m.json", "--heads", &head, "--input", input, "-o", "x.json"]);
    assert_eq!(out.status.code(), Some(1), "ablation without means is a domain error");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(mechuq(d, &["detect-heads", "--bogus"]).status.code(), Some(2));
    assert_eq!(mechuq(d, &["no-such-command"]).status.code(), Some(2));
    ok(d, &["toy", "-o", "m.json"]);
    let out = mechuq(d, &["detect-heads", "--model", "m.json", "--L", "65", "-o", "h.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(mechuq(d, &["detect-heads", "--model", "missing.json", "-o", "h.json"]).status.code(), Some(1));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["toy", "-o", "m.json"]);
    let detect = |seed_env: Option<&str>, extra: &[&str], out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mechuq"));
        c.current_dir(d).env_remove("MECHUQ_SEED");
        if let Some(s) = seed_env {
            c.env("MECHUQ_SEED", s);
        }
        let args = [&["detect-heads", "--model", "m.json", "--L", "8", "--trials", "2", "-o", out][..], extra].concat();
        assert!(c.args(args).status().unwrap().success());
        std::fs::read_to_string(d.join(out)).unwrap()
    };
    let env = detect(Some("7"), &[], "a.json");
    assert_eq!(env, detect(None, &["--seed", "7"], "b.json"));
    assert_eq!(json(&d.join("a.json"))["probe_params"]["seed"], 7);
    let flag_wins = detect(Some("7"), &["--seed", "8"], "c.json");
    assert_eq!(json(&d.join("c.json"))["probe_params"]["seed"], 8);
    assert_ne!(env, flag_wins);
    detect(None, &[], "d.json");
    assert_eq!(json(&d.join("d.json"))["probe_params"]["seed"], 42);
}
