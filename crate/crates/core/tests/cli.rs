use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
modes = ["iomatch", "fixmatch"]
seeds = [0]
epochs = 1
iters_per_epoch = 2
batch_size = 8
mu = 2
n_per_class = 40
"#;

fn iomatch(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_iomatch"));
    cmd.args(args).env_remove("IOMATCH_OUT");
    if let Some(dir) = env_out {
        cmd.env("IOMATCH_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_succeeds() {
    let out = iomatch(&["gradcheck"], None);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("0 failed"));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let runs = dir.path().join("runs");
    let out = iomatch(&["run", "--config", &config, "--out", runs.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["summary.json", "iomatch_seed0.csv", "iomatch_seed0.ckpt.json", "fixmatch_seed0.csv"] {
        assert!(runs.join(name).exists(), "{name}");
    }

    let report = iomatch(&["report", "--out", runs.to_str().unwrap()], None);
    assert_eq!(report.status.code(), Some(0));
    let table = stdout(&report);
    assert!(table.contains("iomatch") && table.contains("fixmatch"));
    assert!(stdout(&out).starts_with(&table));
}

#[test]
fn flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let (from_env, from_flag) = (dir.path().join("env"), dir.path().join("flag"));

    let out = iomatch(&["run", "--config", &config], Some(&from_env));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(from_env.join("summary.json").exists());

    let out = iomatch(&["run", "--config", &config, "--out", from_flag.to_str().unwrap()], Some(&from_env));
    assert_eq!(out.status.code(), Some(0));
    assert!(from_flag.join("summary.json").exists());

    let report = iomatch(&["report"], Some(&from_env));
    assert_eq!(report.status.code(), Some(0));
}

#[test]
fn seeds_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let runs = dir.path().join("runs");
    let out = iomatch(
        &["run", "--config", &config, "--out", runs.to_str().unwrap(), "--seeds", "3,4"],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(runs.join("iomatch_seed3.csv").exists());
    assert!(runs.join("fixmatch_seed4.csv").exists());
    assert!(!runs.join("iomatch_seed0.csv").exists());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    for (extra, key) in [("taup = 0.9\n", "taup"), ("tau_p = 1.5\n", "tau_p")] {
        let config = write_config(dir.path(), extra);
        let out = iomatch(&["run", "--config", &config, "--out", runs.to_str().unwrap()], None);
        assert_eq!(out.status.code(), Some(1));
        assert!(stderr(&out).contains(key), "{}", stderr(&out));
    }
    assert!(!runs.join("summary.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(iomatch(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(iomatch(&["run", "--config", "/nonexistent/config.toml"], None).status.code(), Some(1));
    let empty = tempfile::tempdir().unwrap();
    let out = iomatch(&["report", "--out", empty.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "lr = 1e300\n");
    let runs = dir.path().join("runs");
    let out = iomatch(&["run", "--config", &config, "--out", runs.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
    assert!(runs.join("iomatch_seed0.FAILED").exists());
}
