use std::fs;
use std::process::{Command, Output};

fn osp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &["--workers", "3", "--epochs", "2", "--model-widths", "4,8,3", "--batch", "16"];

#[test]
fn zero_workers_is_a_config_error() {
    let o = osp(&["run", "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`workers`"), "{}", stderr(&o));
}

#[test]
fn unknown_model_names_the_key() {
    let o = osp(&["run", "--sync", "paxos"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`sync`"), "{}", stderr(&o));
}

#[test]
fn run_writes_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let mut args = vec!["run", "--sync", "osp", "--seed", "7", "--trace", "--out", a.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = osp(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("throughput"));
    for f in ["config.toml", "metrics.csv", "metrics.json", "summary.json", "trace.tsv"] {
        assert!(a.join(f).exists(), "{f}");
    }

    // rerun from the echoed config, redirecting the output
    let b = dir.path().join("b");
    let echo = a.join("config.toml");
    let o = osp(&["run", "--config", echo.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("`out` from flag (overrides file)"));
    for f in ["metrics.csv", "metrics.json", "trace.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "sync = \"bsp\"\nworkers = 4\nepochs = 1\nmodel-widths = [4, 8, 3]\n").unwrap();
    let out = dir.path().join("out");
    let o = osp(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--workers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("`workers` from flag (overrides file)"));
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("workers = 2"));
    assert!(echo.contains("sync = \"bsp\""));
}

#[test]
fn compare_emits_one_row_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["compare", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = osp(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("model,status,throughput,top1,iterations_to_top1,mean_bst,relative_throughput"));
    assert!(dir.path().join("osp/metrics.csv").exists());
    assert!(stdout(&o).contains("relative_throughput"));
}

#[test]
fn compare_subset() {
    let mut args = vec!["compare", "--models", "bsp,osp"];
    args.extend_from_slice(SMALL);
    let o = osp(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn check_runs_selected_suites() {
    let o = osp(&["check", "--only", "4,9"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("2/2 checks passed"));
    let o = osp(&["check", "--only", "42"]);
    assert_eq!(o.status.code(), Some(2));
}
