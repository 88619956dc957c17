use std::path::Path;
use std::process::{Command, Output};

fn codepmp(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codepmp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CODEPMP_OUT")
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

const TINY: &[&str] = &[
    "--set",
    "bs=8",
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.n_layers=1",
];

#[test]
fn pipeline_runs_end_to_end_with_lineage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let synth = |fam: &str, out: &str| {
        codepmp(d, &["synth", "--set", &format!("family={fam}"), "--set", "n_pairs=40", "--out", out])
    };
    assert!(synth("pmp_code", "code").status.success());
    assert_eq!(entries(&d.join("code")), ["config.toml", "pairs.jsonl", "pairs.stats.json"]);
    assert!(synth("downstream_reason", "down").status.success());

    let mut args = vec!["pmp-train", "--data", "code/pairs.jsonl", "--out", "pmp"];
    args.extend_from_slice(TINY);
    let out = codepmp(d, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(entries(&d.join("pmp")), ["config.toml", "model.ckpt", "report.json", "timing.json"]);

    let mut args = vec!["rm-finetune", "--data", "down/pairs.jsonl", "--init", "pmp/model.ckpt", "--out", "rm"];
    args.extend_from_slice(TINY);
    assert!(codepmp(d, &args).status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("rm/report.json")).unwrap()).unwrap();
    assert_eq!(report["lineage"]["init"], "pmp/model.ckpt");
    assert_eq!(report["config"]["init"], "pmp/model.ckpt");
    assert_eq!(report["config"]["seed"], 0);
    let digest = codepmp::checkpoint::file_digest(&d.join("pmp/model.ckpt")).unwrap();
    assert_eq!(report["lineage"]["init_digest"], digest.as_str());

    let out = codepmp(d, &["eval", "--checkpoint", "rm/model.ckpt", "--pairs", "down/pairs.jsonl", "--out", "ev"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ev: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ev/eval.json")).unwrap()).unwrap();
    assert!(ev["pairwise_accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn reruns_write_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        let s = codepmp(d, &["synth", "--set", "family=pmp_code", "--set", "n_pairs=30", "--out", &format!("s{out}")]);
        assert!(s.status.success());
        let mut args = vec!["pmp-train", "--data", "sa/pairs.jsonl", "--out", out];
        args.extend_from_slice(TINY);
        assert!(codepmp(d, &args).status.success());
    }
    for f in ["pairs.jsonl", "pairs.stats.json", "config.toml"] {
        assert_eq!(std::fs::read(d.join("sa").join(f)).unwrap(), std::fs::read(d.join("sb").join(f)).unwrap());
    }
    for f in ["model.ckpt", "report.json", "config.toml"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        vec!["synth", "--bogus", "--out", "x"],
        vec!["frobnicate"],
        vec![],
        vec!["report"],
    ] {
        let out = codepmp(d, &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_record(&out)["error"], "usage");
    }
    assert!(entries(d).is_empty());
}

#[test]
fn failures_have_distinct_codes_and_leave_no_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = codepmp(d, &["synth", "--set", "family=pmp_code", "--set", "n_pairz=3", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "config");

    let out = codepmp(d, &["pmp-train", "--data", "missing.jsonl", "--out", "x"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["files"][0], "missing.jsonl");

    std::fs::write(d.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = codepmp(d, &["eval", "--checkpoint", "bad.ckpt", "--pairs", "bad.ckpt", "--out", "x"]);
    assert_eq!(out.status.code(), Some(7));
    assert_eq!(entries(d), ["bad.ckpt"]);

    std::fs::create_dir(d.join("taken")).unwrap();
    let out = codepmp(d, &["synth", "--set", "family=pmp_code", "--set", "n_pairs=5", "--out", "taken"]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_record(&out)["error"], "output_collision");
    assert!(entries(&d.join("taken")).is_empty());
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_codepmp"))
        .args(["synth", "--set", "family=pmp_code", "--set", "n_pairs=5"])
        .current_dir(d)
        .env("CODEPMP_OUT", "artifacts")
        .output()
        .unwrap();
    assert!(out.status.success());
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(printed.trim().starts_with("artifacts/synth-"), "{printed}");
    assert!(d.join(printed.trim()).join("pairs.jsonl").exists());
}

#[test]
fn sweep_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweep-smoke.toml");
    let cfg = cfg.to_str().unwrap();
    assert!(codepmp(d, &["sweep", "--config", cfg, "--out", "s1"]).status.success());
    let rows = std::fs::read_to_string(d.join("s1/results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 2 * 2);
    let points: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s1/points.json")).unwrap()).unwrap();
    assert!(points.as_array().unwrap().iter().all(|p| p["lineage"]["fresh"] == true));

    assert!(codepmp(d, &["report", "s1", "--out", "r1"]).status.success());
    assert!(codepmp(d, &["report", "s1", "--out", "r2"]).status.success());
    for f in entries(&d.join("r1")) {
        assert_eq!(std::fs::read(d.join("r1").join(&f)).unwrap(), std::fs::read(d.join("r2").join(&f)).unwrap());
    }

    std::fs::create_dir(d.join("odd")).unwrap();
    std::fs::write(d.join("odd/results.csv"), "a,b\n1,2\n").unwrap();
    let out = codepmp(d, &["report", "s1", "odd", "--out", "r3"]);
    assert_eq!(out.status.code(), Some(8));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "aggregation");
    assert_eq!(rec["files"][0], "odd/results.csv");
    assert!(!d.join("r3").exists());
}
