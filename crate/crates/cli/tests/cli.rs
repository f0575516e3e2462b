use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const CONFIG: &str = r#"
schema_version = 1
name = "cli"
strategies = ["naive", "casam"]
n_blocks = 1

[stream]
tasks = [0, 2]
ood = [6]
train_per_task = 10
test_per_task = 4

[backbone]
seed = 5

[backbone.pretrain]
steps = 20
eval_samples = 4
iou_floor = 0.0

[train]
epochs = 1
batch_size = 4

[router]
folds = 2

[router.vae]
epochs = 2
"#;

/// A config file whose backbone cache is shared by every test in this file
/// and filled once.
fn shared() -> &'static (TempDir, PathBuf) {
    static CELL: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache");
        let text = CONFIG.replace("seed = 5", &format!("seed = 5\ncache_dir = {:?}", cache.to_str().unwrap()));
        let path = dir.path().join("config.toml");
        fs::write(&path, text).unwrap();
        let out = casam(&["pretrain", "--config", path.to_str().unwrap()], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (dir, path)
    })
}

fn config() -> &'static str {
    shared().1.to_str().unwrap()
}

fn casam(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_casam"));
    cmd.args(args).env_remove("CASAM_OUTPUT_DIR").env_remove("CASAM_THREADS").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn with_override(extra: &str, dir: &Path) -> PathBuf {
    let text = fs::read_to_string(config()).unwrap();
    let path = dir.join("variant.toml");
    fs::write(&path, format!("{}\n{}", text, extra)).unwrap();
    path
}

#[test]
fn pretrain_reuses_the_cache() {
    let out = casam(&["pretrain", "--config", config()], &[]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("cached backbone"));
}

#[test]
fn run_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("report");
    let out = casam(&["run", "--config", config(), "--out", out_dir.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(stdout(&out).contains(&table));

    let report = casam(&["report", "--out", out_dir.to_str().unwrap()], &[]);
    assert!(report.status.success());

    let tampered = table.replace("naive,true,", "naive,false,");
    fs::write(out_dir.join("comparison.csv"), tampered).unwrap();
    let report = casam(&["report", "--out", out_dir.to_str().unwrap()], &[]);
    assert!(!report.status.success());
}

#[test]
fn flags_override_environment_which_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let from_env = dir.path().join("from-env");
    let from_flag = dir.path().join("from-flag");
    let env = [("CASAM_OUTPUT_DIR", from_env.to_str().unwrap()), ("CASAM_THREADS", "2")];

    let out = casam(&["run", "--config", config(), "--strategies", "naive"], &env);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(from_env.join("manifest.json").exists());
    let cfg = fs::read_to_string(from_env.join("config.toml")).unwrap();
    assert!(cfg.contains("jobs = 2"));

    let out = casam(
        &["run", "--config", config(), "--strategies", "naive", "--out", from_flag.to_str().unwrap(), "--jobs", "1"],
        &env,
    );
    assert!(out.status.success());
    let cfg = fs::read_to_string(from_flag.join("config.toml")).unwrap();
    assert!(cfg.contains("jobs = 1"));
    assert_eq!(
        fs::read(from_env.join("comparison.csv")).unwrap(),
        fs::read(from_flag.join("comparison.csv")).unwrap()
    );
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = |sub: &str, seed: Option<&str>| {
        let out_dir = dir.path().join(sub);
        let mut args = vec!["run", "--config", config(), "--strategies", "naive", "--out", out_dir.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed-override", s]);
        }
        assert!(casam(&args, &[]).status.success());
        let text = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    let base = manifest("base", None);
    let a = manifest("a", Some("11"));
    let b = manifest("b", Some("11"));
    assert_ne!(base, a);
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a/comparison.csv")).unwrap(),
        fs::read(dir.path().join("b/comparison.csv")).unwrap()
    );
}

#[test]
fn failed_strategy_gives_nonzero_exit_but_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_override("[strategy]\nlambda_ewc = 1e300", dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace(r#"["naive", "casam"]"#, r#"["naive", "ewc"]"#);
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("report");
    let out = casam(
        &["run", "--config", cfg.to_str().unwrap(), "--strategies", "naive,ewc", "--out", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ewc"));
    let table = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert!(table.contains("\nnaive,"));
    assert!(!table.contains("\newc,"));
}

#[test]
fn invalid_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\nmystery = 3\n").unwrap();
    assert!(!casam(&["run", "--config", bad.to_str().unwrap()], &[]).status.success());
    assert!(!casam(&["sweep", "--config", config(), "--axis", "depth"], &[]).status.success());
    assert!(!casam(&["run", "--config", config(), "--strategies", "ewc"], &[]).status.success());
    assert!(!casam(&["run", "--config", config(), "--jobs", "0"], &[]).status.success());
    assert!(!casam(&["route", "--config", config(), "--pool", dir.path().to_str().unwrap()], &[]).status.success());
    assert!(!casam(&["report", "--out", dir.path().to_str().unwrap()], &[]).status.success());
}

#[test]
fn sweep_and_route_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = casam(
        &["sweep", "--config", config(), "--axis", "temperature", "--values", "0.5,2", "--out", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(out_dir.join("sweep_temperature.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0.5,") && rows[2].starts_with("2,"));

    let run_dir = dir.path().join("run");
    let out = casam(&["run", "--config", config(), "--strategies", "casam", "--out", run_dir.to_str().unwrap()], &[]);
    assert!(out.status.success());
    let pool = run_dir.join("pool");
    let route = |sub: &str| {
        let o = dir.path().join(sub);
        let out = casam(
            &["route", "--config", config(), "--pool", pool.to_str().unwrap(), "--out", o.to_str().unwrap()],
            &[],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("in-distribution accuracy"));
        fs::read_to_string(o.join("routes.csv")).unwrap()
    };
    let first = route("r1");
    assert_eq!(first, route("r2"));
    assert_eq!(first.lines().count(), 1 + 3 * 4);
}
