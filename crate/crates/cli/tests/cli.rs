use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use poolrefine::pool::load_snapshot;
use poolrefine::testbed::{pool_spurious_pmi, SyntheticBiasSpec};
use poolrefine::{load_config, RunConfig};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.yaml");

fn poolrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poolrefine"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn accuracy(report: &Path, name: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    v["accuracy"][name].as_f64().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(poolrefine(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(poolrefine(&["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(poolrefine(&["testbed", "--seed", "minus-one"]).status.code(), Some(2));
    assert_eq!(poolrefine(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_desk_config_matches_preset() {
    assert_eq!(load_config(Path::new(DESK)).unwrap(), RunConfig::desk());
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.yaml");
    fs::write(&cfg, "n_bi: 0\n").unwrap();
    let tb = dir.path().join("tb");
    assert!(poolrefine(&["testbed", "--n", "300", "--out", s(&tb)]).status.success());
    let o = poolrefine(&["run", "--config", s(&cfg), "--pool", s(&tb), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_bi"), "{}", stderr(&o));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn empty_dataset_is_reported_by_file() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    assert!(poolrefine(&["testbed", "--n", "300", "--out", s(&tb)]).status.success());
    let empty = dir.path().join("empty_split.jsonl");
    fs::write(&empty, "").unwrap();
    let o = poolrefine(&[
        "evaluate",
        "--config",
        DESK,
        "--pool",
        s(&tb),
        "--dataset",
        &format!("anti={}", s(&empty)),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("empty_split.jsonl"), "{err}");
}

#[test]
fn occupied_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    assert!(poolrefine(&["testbed", "--n", "300", "--out", s(&tb)]).status.success());
    let before: Vec<_> = fs::read_dir(&tb).unwrap().map(|e| e.unwrap().path()).collect();
    let again = poolrefine(&["testbed", "--n", "300", "--out", s(&tb)]);
    assert_eq!(again.status.code(), Some(1));
    let o = poolrefine(&["run", "--config", DESK, "--pool", s(&tb), "--out", s(&tb)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not empty"), "{}", stderr(&o));
    let after: Vec<_> = fs::read_dir(&tb).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(before, after);
}

#[test]
fn one_off_stages_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert!(poolrefine(&["testbed", "--n", "600", "--seed", "3", "--out", s(&p("tb"))]).status.success());
    let steps: Vec<Vec<String>> = vec![
        vec!["score".into(), "--pool".into(), s(&p("tb")).into(), "--out".into(), s(&p("s")).into()],
        vec![
            "generate".into(),
            "--pool".into(),
            s(&p("s").join("scored.jsonl")).into(),
            "--n".into(),
            "200".into(),
            "--out".into(),
            s(&p("g")).into(),
        ],
        vec![
            "filter".into(),
            "--pool".into(),
            s(&p("tb")).into(),
            "--candidates".into(),
            s(&p("g").join("candidates.jsonl")).into(),
            "--out".into(),
            s(&p("f")).into(),
        ],
        vec!["retrain".into(), "--pool".into(), s(&p("tb")).into(), "--out".into(), s(&p("m")).into()],
    ];
    for step in &steps {
        let mut args: Vec<&str> = vec!["--config", DESK];
        args.extend(step.iter().map(String::as_str));
        let o = poolrefine(&args);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
    for f in ["s/scored.jsonl", "s/shallow/state.json", "g/candidates.jsonl", "g/generator/state.json", "f/kept.jsonl", "f/rejections.jsonl", "m/model/state.json"] {
        assert!(p(f).exists(), "{f}");
    }
    let o = poolrefine(&[
        "evaluate",
        "--model",
        s(&p("m").join("model")),
        "--dataset",
        &format!("dev={}", s(&p("tb").join("unbiased_dev.jsonl"))),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"dev\""));
}

/// The scripted path of the acceptance suite: testbed, run, evaluate. The
/// refined pool must carry a weaker token/label association and the task
/// model trained on it must do better on the anti-biased split.
#[test]
fn testbed_run_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let ok = |args: &[&str]| {
        let o = poolrefine(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["testbed", "--rho", "0.95", "--n", "2000", "--seed", "0", "--out", s(&p("tb"))]);
    ok(&["run", "--config", DESK, "--seed", "0", "--pool", s(&p("tb")), "--out", s(&p("run"))]);
    let anti = format!("anti={}", s(&p("tb").join("anti_biased.jsonl")));
    let dev = format!("dev={}", s(&p("tb").join("unbiased_dev.jsonl")));
    for (pool, out) in [("tb", "base"), ("run", "run")] {
        ok(&[
            "evaluate", "--config", DESK, "--seed", "0", "--pool", s(&p(pool)), "--dataset", &anti, "--dataset", &dev,
            "--out", s(&p(out)),
        ]);
    }
    let report = ok(&["report", "--run", s(&p("run"))]);
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("final pool") && text.contains("anti:"), "{text}");

    let spec = SyntheticBiasSpec::default();
    let before = pool_spurious_pmi(&load_snapshot(&p("run").join("snapshots"), Some(0)).unwrap(), &spec).unwrap();
    let after = pool_spurious_pmi(&load_snapshot(&p("run").join("snapshots"), None).unwrap(), &spec).unwrap();
    assert!(after.pmi <= 0.7 * before.pmi, "{} -> {}", before.pmi, after.pmi);
    let gain = accuracy(&p("run").join("eval_report.json"), "anti") - accuracy(&p("base").join("eval_report.json"), "anti");
    assert!(gain >= 0.05, "{gain}");
}
