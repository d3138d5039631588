use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use torpido::records::{read_curves, read_manifest};

fn torpido(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_torpido")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn generate(dir: &Path, domain: &str, size: usize, count: usize) -> Vec<PathBuf> {
    let out = torpido(&[
        "generate",
        "--domain",
        domain,
        "--size",
        &size.to_string(),
        "--count",
        &count.to_string(),
        "--seed",
        "5",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    stdout(&out).lines().map(PathBuf::from).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 8] = [
    "--workers-per-instance",
    "1",
    "--total-env-steps",
    "200",
    "--eval-interval",
    "100",
    "--eval-episodes",
    "2",
];

#[test]
fn generate_writes_instances() {
    let dir = tempfile::tempdir().unwrap();
    let paths = generate(dir.path(), "game_of_life", 9, 2);
    assert_eq!(paths.len(), 2);
    assert!(paths.iter().all(|p| p.exists()));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&torpido(&["train", "--bogus"])), 2);
    assert_eq!(code(&torpido(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = torpido(&["generate", "--domain", "chess", "--size", "4", "--count", "1", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    let out = torpido(&["generate", "--domain", "navigation", "--size", "7", "--count", "1", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_files_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let none = dir.path().join("none");
    let out = torpido(&["evaluate", "--ckpt", s(&none), "--instance", s(&none)]);
    assert_eq!(code(&out), 3);
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_instance_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.inst");
    std::fs::write(&bad, "domain = sysadmin\nnum_vars = x\n").unwrap();
    let curves = dir.path().join("c.csv");
    let out = torpido(&["train", "--sources", s(&bad), "--out", s(&dir.path().join("m.ckpt")), "--curves", s(&curves)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let src = generate(dir.path(), "sysadmin", 4, 1);
    let mut args = vec![
        "train",
        "--sources",
        s(&src[0]),
        "--out",
        "unused.ckpt",
        "--curves",
        "unused.csv",
        "--learning-rate",
        "inf",
    ];
    args.extend(QUICK);
    let out = Command::new(env!("CARGO_BIN_EXE_torpido"))
        .args(&args)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);
}

#[test]
fn ablation_dry_run_echoes_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let src = generate(dir.path(), "sysadmin", 4, 2);
    let out = torpido(&[
        "ablate",
        "--variant",
        "gcn",
        "--sources",
        s(&src[0]),
        s(&src[1]),
        "--out",
        s(&dir.path().join("m.ckpt")),
        "--curves",
        s(&dir.path().join("c.csv")),
        "--use-sad-tr",
        "on",
        "--dry-run",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("use_sad_tr = off"), "{text}");
    assert!(text.contains("use_ic = off"));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn train_then_transfer_with_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let specs = generate(dir.path(), "sysadmin", 4, 3);
    let ckpt = dir.path().join("m.ckpt");
    let manifest = dir.path().join("manifest.txt");
    let mut args = vec![
        "train",
        "--sources",
        s(&specs[0]),
        s(&specs[1]),
        "--out",
        s(&ckpt),
        "--curves",
        "train.csv",
        "--manifest",
        "manifest.txt",
    ];
    args.extend(QUICK);
    let out = Command::new(env!("CARGO_BIN_EXE_torpido"))
        .args(&args)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let tcurves = dir.path().join("transfer.csv");
    let out = torpido(&[
        "transfer",
        "--ckpt",
        s(&ckpt),
        "--target",
        s(&specs[2]),
        "--mode",
        "zero-shot",
        "--curves",
        s(&tcurves),
        "--manifest",
        s(&manifest),
        "--decoder-pairs",
        "300",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let m = read_manifest(&manifest).unwrap();
    assert_eq!(m.bounds.len(), 3);
    assert_eq!(m.runs.len(), 2);
    let recs = read_curves(&tcurves).unwrap();
    assert!(recs.iter().any(|r| r.algorithm == "OPTIMAL"));
    assert!(recs.iter().any(|r| r.algorithm == "RANDOM"));
    for r in &recs {
        let b = m.bounds[&r.instance_id];
        assert!(r.mean_return >= b.v_inf && r.mean_return <= b.v_sup);
        assert!(r.alpha.is_some_and(|a| (0.0..=1.0).contains(&a)));
    }

    let out = torpido(&["evaluate", "--ckpt", s(&ckpt), "--instance", s(&specs[0]), "--episodes", "3"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("mean_return "));

    let other = generate(dir.path(), "sysadmin", 6, 1);
    let out = torpido(&["evaluate", "--ckpt", s(&ckpt), "--instance", s(&other[0])]);
    assert_eq!(code(&out), 3);
}
