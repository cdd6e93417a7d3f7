use std::path::Path;
use std::process::{Command, Output};

fn ntklab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntklab"))
        .args(args)
        .current_dir(dir)
        .env_remove("NTKLAB_DATA_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn phase_diagram_writes_csv_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = ntklab(
        &[
            "phase-diagram",
            "--activation",
            "relu",
            "--sigma-w-sq",
            "1.5,2,2.5",
            "--sigma-b-sq",
            "0,1",
            "--out-dir",
            "res",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("6 jobs"));
    let csv = std::fs::read_to_string(dir.path().join("res/phase-diagram.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment,activation,sigma_w_sq,sigma_b_sq,depth,width,covariance,samples,replicate,step,statistic,value"
    );
    assert!(csv.contains("phase-diagram,relu,2,0,,,,,,,phase,EOC"));
    assert!(csv.contains("phase-diagram,relu,2.5,1,,,,,,,phase,chaotic"));
    assert!(csv.contains("phase-diagram,relu,,1,,,,,,,eoc_sigma_w_sq,2"));
    let records = std::fs::read_to_string(dir.path().join("res/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 6);

    let q = ntklab(&["query", "--store", "res/records.jsonl", "--sigma-w-sq", "2"], dir.path());
    assert!(q.status.success(), "{}", stderr(&q));
    let text = String::from_utf8(q.stdout).unwrap();
    assert!(text.starts_with("kind,activation,"));
    assert_eq!(text.lines().filter(|l| l.contains(",chi1,")).count(), 2);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("k.toml"),
        "experiment = \"kappa-curves\"\nhypers = [[1.0, 1.0]]\ncovariances = [0.5]\n",
    )
    .unwrap();
    let out = ntklab(
        &["kappa-curves", "--config", "k.toml", "--depths", "1:3", "--out-dir", "o"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("o/kappa-curves.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",kappa_ratio,")).count(), 3);
}

#[test]
fn identical_runs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "init-variance",
            "--sigma-w-sq",
            "1,3",
            "--depths",
            "2,4",
            "--widths",
            "8",
            "--n-seeds",
            "5",
            "--input-dim",
            "6",
            "--seed",
            "11",
            "--out-dir",
            out,
        ]
    };
    assert!(ntklab(&args("a"), dir.path()).status.success());
    let mut threaded = vec!["--threads", "2"];
    threaded.extend(args("b"));
    assert!(ntklab(&threaded, dir.path()).status.success());
    let a = std::fs::read(dir.path().join("a/init-variance.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/init-variance.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn print_config_shows_effective_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = ntklab(&["train-drift", "--steps", "7", "--print-config"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("experiment = \"train-drift\""));
    assert!(text.contains("max_steps = 7"));
    assert!(!dir.path().join("results").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ntklab(&["--help"], dir.path()).status.code(), Some(0));
    let help = ntklab(&["train-drift", "--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8(help.stdout).unwrap().contains("learning_rate = 0.00001"));
    // usage and config errors
    assert_eq!(ntklab(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(ntklab(&["kappa-curves", "--depths", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(
        ntklab(&["phase-diagram", "--sigma-w-sq", "-1"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        ntklab(&["init-variance", "--config", "missing.toml"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        ntklab(&["train-drift", "--data", "mnist"], dir.path()).status.code(),
        Some(1)
    );
    // runtime error: the data directory exists but holds no IDX files
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ntklab"))
        .args(["train-drift", "--data", "mnist", "--depths", "2", "--sigma-w-sq", "1"])
        .current_dir(dir.path())
        .env("NTKLAB_DATA_DIR", &empty)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
