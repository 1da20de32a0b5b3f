use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{"seeds":[0],
  "selection":{"M":30,"k":64,"P":2},
  "scaling":{"M_list":[10,30]},
  "victim":{"epochs":3},
  "retrain":{"epochs":3},
  "data":{"synthetic":{"train":120,"validation":40,"test":80,"pool":300}}}"#;

fn selectkit(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.json");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_selectkit"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("work"))
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(&selectkit(d, &["train-victim"])).contains("victim: accuracy"));
    assert!(ok(&selectkit(d, &["autolabel"])).contains("pseudolabel counts"));
    assert!(ok(&selectkit(d, &["build-store", "--k", "32"])).contains("k = 32"));
    for method in ["select", "select-batch", "random", "topk", "topk_balanced", "pmin", "pmax"] {
        let text = ok(&selectkit(d, &["select", "--method", method]));
        assert!(text.contains("selected 30 of 300"), "{text}");
    }
    assert!(ok(&selectkit(d, &["retrain"])).contains("retrained on select"));
    assert!(ok(&selectkit(d, &["metrics", "--method", "random"])).contains("containment"));

    let work = d.join("work");
    for name in [
        "theta0.selc",
        "theta_f.selc",
        "store.selg",
        "directions.json",
        "pseudolabels.json",
        "selection-select.json",
        "selection-select_batch.json",
        "retrain-select.json",
        "metrics-random.json",
    ] {
        assert!(work.join(name).exists(), "{name} missing");
    }
    let sel: serde_json::Value = serde_json::from_slice(&fs::read(work.join("selection-select.json")).unwrap()).unwrap();
    assert_eq!(sel["indices"].as_array().unwrap().len(), 30);
}

#[test]
fn later_stage_without_earlier_one_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = selectkit(dir.path(), &["select"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-victim"));
}

#[test]
fn seed_flag_replaces_first_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&selectkit(dir.path(), &["train-victim", "--seed", "9"]));
    let info: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("work/run.json")).unwrap()).unwrap();
    assert_eq!(info["seed"], 9);
}

#[test]
fn experiment_writes_report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&selectkit(dir.path(), &["experiment", "scaling", "--parallel", "2"]));
    assert!(text.contains("M=30"), "{text}");
    let work = dir.path().join("work");
    for name in ["report.json", "report.csv", "figures/scaling.csv", "figures/scaling.svg"] {
        assert!(work.join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(work.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "scaling");
}

#[test]
fn rejects_unknown_names() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!selectkit(dir.path(), &["select", "--method", "best"]).status.success());
    assert!(!selectkit(dir.path(), &["experiment", "everything"]).status.success());
}
