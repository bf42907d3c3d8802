use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "points=64",
    "--set",
    "half_length=6.283185307179586",
    "--set",
    "dt=0.015625",
    "--set",
    "t_end=0.5",
    "--set",
    "level=4",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parakpz")).args(args).env("PARAKPZ_QUIET", "1").output().unwrap()
}

fn run_small(cmd: &str, extra: &[&str]) -> Output {
    let mut a = vec![cmd];
    a.extend(SMALL);
    a.extend(extra);
    run(&a)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn spectral_suite_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("v");
    let o = run(&["verify", "--suite", "spectral", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS fft round trip"));
    assert!(out.join("verify_spectral.json").exists());
}

#[test]
fn unknown_suite_is_an_error() {
    let o = run(&["verify", "--suite", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("available"));
}

#[test]
fn enhance_is_reproducible_from_seed() {
    let d = tempfile::tempdir().unwrap();
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = run_small("enhance", &["--seed", seed, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb, fc) = (files(&a), files(&b), files(&c));
    assert_eq!(fa, fb);
    let x = |f: &[(String, Vec<u8>)]| f.iter().find(|(n, _)| n == "x.bin").unwrap().1.clone();
    assert_ne!(x(&fa), x(&fc));
    let manifest = String::from_utf8(fa.iter().find(|(n, _)| n == "run_manifest.json").unwrap().1.clone()).unwrap();
    assert!(manifest.contains("\"command\": \"enhance\""));
}

#[test]
fn missing_required_argument_exits_with_usage() {
    let o = run(&["solve-kpz", "--out", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_configuration_lists_violations() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["enhance", "--set", "alpha=0.7", "--set", "points=100", "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("α = 0.7"), "{err}");
    assert!(err.contains("100 points"), "{err}");
}

#[test]
fn full_pipeline_writes_expected_files() {
    let d = tempfile::tempdir().unwrap();
    let p = |s: &str| d.path().join(s).to_str().unwrap().to_string();
    assert!(run_small("enhance", &["--seed", "2", "--out", &p("e")]).status.success());
    assert!(run_small("solve-she", &["--data", &p("e"), "--out", &p("s")]).status.success());
    let o = run_small("solve-kpz", &["--data", &p("e"), "--hbar", "sin", "--out", &p("k")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run_small("polymer", &["--data", &p("e"), "--h", &p("k"), "--times", "0.25,0.5", "--paths", "50", "--out", &p("p")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["s/she_norms.csv", "s/report.json", "k/profile.csv", "k/certificate.json", "k/lower_bound.json", "p/paths.csv", "p/summary.json", "p/kernel_1.bin.json"] {
        assert!(d.path().join(f).exists(), "{f} missing");
    }
    let (header, rows) = parakpz::report::read_csv(&d.path().join("p/paths.csv")).unwrap();
    assert_eq!(header[0], "path");
    assert_eq!(rows.len(), 50 * 3);
    assert!(rows.iter().all(|r| r[2].abs() <= std::f64::consts::PI));
}

#[test]
fn info_reports_schema_and_defaults() {
    let o = run(&["info"]);
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("schema_version 1"));
    assert!(s.contains("alpha = 0.45"));
}
