use std::path::Path;
use std::process::{Command, Output};

fn relssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relssl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL_DATA: &str = r#"
branching = [2, 2, 2]
input_dim = 6
level_sigma = [2.0, 1.5, 1.0]
leaf_sigma = 0.5
labeled_per_species = 4
unlabeled_per_species = 4
ood_unlabeled_per_species = 4
test_per_species = 4
seed = 2
"#;

const SMALL_TRAIN: &str = r#"
total_steps = 12
batch_size = 4
mu = 2
hidden_dims = [8]
triplet_samples = 32
"#;

fn generate_small(dir: &Path) -> String {
    let cfg = dir.join("data.toml");
    std::fs::write(&cfg, SMALL_DATA).unwrap();
    let data = dir.join("data");
    let out = relssl(&["generate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.to_str().unwrap().to_string()
}

fn train_config(dir: &Path) -> String {
    let cfg = dir.join("train.toml");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn verify_tree_reports_zero_violations() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("t.nwk");
    std::fs::write(&tree, "(((a,b),(c,d)),((e,f),(g)));\n").unwrap();
    let json = dir.path().join("report.json");
    let out = relssl(&["verify-tree", tree.to_str().unwrap(), "--out", json.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("0 violations"), "{}", stdout(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn train_then_evaluate_writes_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let cfg = train_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = relssl(&["train", "--data", &data, "--config", &cfg, "--seed", "3", "--out", run_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["config.toml", "checkpoint.json", "metrics.jsonl", "curve.json", "run.json"] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let written = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("seed = 3"));

    let out = relssl(&["evaluate", "--data", &data, "--run", run_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = run.join("eval").join(relssl::evaluation::REPORT_FILE);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    relssl::evaluation::validate_report_json(&value).unwrap().check_invariants().unwrap();

    // evaluating again refuses to clobber the report
    assert_eq!(code(&relssl(&["evaluate", "--data", &data, "--run", run_s])), 6);
}

#[test]
fn resume_extends_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let cfg = train_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert_eq!(code(&relssl(&["train", "--data", &data, "--config", &cfg, "--out", run_s])), 0);
    // same config: nothing left to do
    assert_eq!(code(&relssl(&["train", "--data", &data, "--config", &cfg, "--out", run_s, "--resume"])), 0);
    // a different trajectory must not pick up the checkpoint
    let out = relssl(&["train", "--data", &data, "--config", &cfg, "--set", "base_lr=0.5", "--out", run_s, "--resume"]);
    assert_eq!(code(&out), 8, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_tree_depth_runs_every_depth_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let cfg = train_config(dir.path());
    let grid = dir.path().join("grid");
    let out =
        relssl(&["ablate", "--data", &data, "--axis", "tree-depth", "--config", &cfg, "--out", grid.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(grid.join("summary.csv")).unwrap();
    let depths: Vec<String> = reader.records().map(|r| r.unwrap()[1].to_string()).collect();
    // three branching levels plus the leaves give four relation levels
    assert_eq!(depths, ["2", "3", "4"]);
}

#[test]
fn exit_codes_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = relssl(&["train", "--data", &data, "--set", "learning_rate=1", "--out", run_s]);
    assert_eq!(code(&out), 3);
    let out = relssl(&["train", "--data", &data, "--set", "total_steps=-4", "--out", run_s]);
    assert_eq!(code(&out), 4);
    let missing = dir.path().join("nowhere");
    let out = relssl(&["train", "--data", missing.to_str().unwrap(), "--out", run_s]);
    assert_eq!(code(&out), 5);
    let out = relssl(&["verify-tree", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 5);
    // the data directory is not empty
    let out = relssl(&["generate", "--out", &data]);
    assert_eq!(code(&out), 6);
    assert_eq!(code(&relssl(&["train", "--bogus"])), 2);
}

#[test]
fn ragged_tree_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("ragged.nwk");
    std::fs::write(&tree, "((a,b),c);\n").unwrap();
    let out = relssl(&["verify-tree", tree.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
}
