//! The `mcsae` binary driven as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
[simulate]
preset = "vacancy"
[bootstrap]
replicates = 50
ipw_replicates = 50
[fh]
rounds = 20
"#;

fn mcsae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcsae"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mcsae.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn run_writes_the_report() {
    let dir = setup();
    let out = mcsae(dir.path(), &["run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let estimates = fs::read_to_string(dir.path().join("out/estimates.csv")).unwrap();
    assert!(estimates.starts_with("period,domain,estimator,value,variance,mse,rrmse,quality,provenance\n"));
    for tag in [",H,", ",MC,", ",EBLUP,", ",YL,"] {
        assert!(estimates.contains(tag), "no {tag} rows");
    }
}

#[test]
fn subcommands_match_run() {
    let dir = setup();
    assert!(mcsae(dir.path(), &["run", "--out", "whole"]).status.success());
    for stage in ["simulate", "estimate", "bootstrap", "fh", "yl", "report"] {
        let out = mcsae(dir.path(), &[stage, "--out", "staged"]);
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["estimates.csv", "manifest.json", "variances.csv", "fh.csv", "yl.csv"] {
        let a = fs::read(dir.path().join("whole").join(name)).unwrap();
        let b = fs::read(dir.path().join("staged").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = setup();
    for (threads, out) in [("1", "t1"), ("3", "t3")] {
        let o = mcsae(dir.path(), &["run", "--threads", threads, "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("t1/estimates.csv")).unwrap();
    let b = fs::read(dir.path().join("t3/estimates.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn overrides_reach_the_manifest() {
    let dir = setup();
    let out = mcsae(dir.path(), &["--seed", "9", "--replicates", "20", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"), "{manifest}");
    assert!(manifest.contains("\"replicates\": 20"), "{manifest}");
}

#[test]
fn missing_dependency_fails_with_the_file_name() {
    let dir = setup();
    assert!(mcsae(dir.path(), &["simulate"]).status.success());
    let out = mcsae(dir.path(), &["--stage", "bootstrap"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `bootstrap` failed"), "{err}");
    assert!(err.contains("point_estimates.csv"), "{err}");
}

#[test]
fn usage_errors() {
    let dir = setup();
    let out = mcsae(dir.path(), &["fh", "--stage", "yl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("conflicts"));

    let out = mcsae(dir.path(), &["--config", "absent.toml", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));

    fs::write(dir.path().join("bad.toml"), "[simulate]\npreset = \"turnover\"\n").unwrap();
    let out = mcsae(dir.path(), &["--config", "bad.toml", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}
