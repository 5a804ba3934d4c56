use std::path::Path;
use std::process::{Command, Output};

fn evasim(root: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evasim"));
    cmd.arg("--corpus-dir")
        .arg(root.join("corpus"))
        .arg("--out-dir")
        .arg(root.join("out"))
        .arg("--threads")
        .arg("1");
    cmd.args(args);
    cmd.env_remove("EVASIM_SEED");
    if let Some(s) = seed_env {
        cmd.env("EVASIM_SEED", s);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: [&str; 5] = ["gen-corpus", "--n-benign", "6", "--n-malware", "6"];

fn manifest(root: &Path) -> Vec<u8> {
    std::fs::read(root.join("corpus/manifest.json")).unwrap()
}

#[test]
fn seed_variable_overrides_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    evasim(&a, &[&SMALL[..], &["--seed", "9"]].concat(), None);
    evasim(&b, &[&SMALL[..], &["--seed", "1"]].concat(), Some("9"));
    evasim(&c, &[&SMALL[..], &["--seed", "1"]].concat(), None);
    assert_eq!(manifest(&a), manifest(&b));
    assert_ne!(manifest(&a), manifest(&c));
}

#[test]
fn malformed_seed_variable_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_evasim"))
        .arg("--corpus-dir")
        .arg(tmp.path().join("corpus"))
        .args(SMALL)
        .env("EVASIM_SEED", "seven")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("EVASIM_SEED"));
}

#[test]
fn every_subcommand_runs_in_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    evasim(root, &SMALL, None);
    evasim(root, &["train", "--epochs", "20"], None);
    evasim(root, &["hash"], None);
    evasim(root, &["detect"], None);
    evasim(root, &["attack-all", "--target", "ctph", "--max-iterations", "2"], None);
    evasim(root, &["eval"], None);
    let md = evasim(root, &["report"], None);
    assert!(!md.stdout.is_empty());
    assert!(root.join("out/report/report.json").is_file());

    let sample = std::fs::read_dir(root.join("corpus/malware"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let digest = String::from_utf8(evasim(root, &["hash", sample.to_str().unwrap()], None).stdout).unwrap();
    assert!(digest.contains(sample.to_str().unwrap()));
    let verdicts = String::from_utf8(evasim(root, &["detect", sample.to_str().unwrap()], None).stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(verdicts.trim()).unwrap();
    assert_eq!(v["verdicts"].as_array().unwrap().len(), 3);
}
