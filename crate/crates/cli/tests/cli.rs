use std::path::Path;
use std::process::{Command, Output};

fn svrb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svrb"))
        .args(args)
        .env_remove("SVRB_OUT_DIR")
        .env_remove("SVRB_THREADS")
        .output()
        .expect("binary runs")
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--case",
        "uniform4",
        "--mesh",
        "8",
        "--particles",
        "6",
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    svrb(&args)
}

#[test]
fn identical_seeds_give_identical_particle_files() {
    for backend in ["hifi", "rb-adaptive"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert!(small_run(a.path(), &["--max-steps", "4", "--backend", backend, "--threads", "1"]).status.success());
        assert!(small_run(b.path(), &["--max-steps", "4", "--backend", backend, "--threads", "1"]).status.success());
        let pa = std::fs::read(a.path().join("particles.csv")).unwrap();
        let pb = std::fs::read(b.path().join("particles.csv")).unwrap();
        assert_eq!(pa, pb, "{backend}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_run(dir.path(), &["--particles", "0"]).status.code(), Some(2));
    assert_eq!(small_run(dir.path(), &["--eps0", "-1"]).status.code(), Some(2));
    assert_eq!(svrb(&["run", "--case", "no-such-case"]).status.code(), Some(2));
    assert_eq!(svrb(&["run", "--bogus-flag"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"problem": {"case": {"kind": "uniform4"}, "mesh": 8}, "svgd": {}, "extra": 1}"#).unwrap();
    assert_eq!(svrb(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(svrb(&["analyze", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_svrb"))
        .args(["run", "--mesh", "6", "--particles", "3", "--max-steps", "1", "--backend", "hifi"])
        .env("SVRB_OUT_DIR", dir.path())
        .env("SVRB_THREADS", "1")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("particles.csv").exists());
}

#[test]
fn zero_steps_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path(), &["--max-steps", "0", "--backend", "rb-fixed", "--rb-tol", "1e-6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("particles.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("0,")));
    let a = svrb(&["analyze", dir.path().to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(dir.path().join("curves.csv").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{
            "problem": {"case": {"kind": "gaussian9"}, "mesh": 6},
            "svgd": {"particles": 3, "max_steps": 2, "seed": 4},
            "backend": {"kind": "rb-adaptive", "eps0": 0.1, "period": 1}
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let o = svrb(&["run", "--config", cfg.to_str().unwrap(), "--max-steps", "1", "--out", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_to_string(out_dir.join("config.json")).unwrap();
    assert!(written.contains("\"max_steps\": 1"));
    assert!(written.contains("gaussian9"));
    assert!(out_dir.join("schedule.csv").exists());
}

#[test]
fn save_and_load_reduced_basis() {
    let dir = tempfile::tempdir().unwrap();
    let rb = dir.path().join("rb.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(small_run(&a, &["--max-steps", "3", "--backend", "rb-fixed", "--save-rb", rb.to_str().unwrap()]).status.success());
    assert!(rb.exists());
    assert!(small_run(&b, &["--max-steps", "3", "--backend", "rb-fixed", "--load-rb", rb.to_str().unwrap()]).status.success());
    assert_eq!(
        std::fs::read(a.join("particles.csv")).unwrap(),
        std::fs::read(b.join("particles.csv")).unwrap()
    );
}

#[test]
fn bench_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", "--mesh", "8", "--particles", "4", "--max-steps", "2", "--out"];
    let p = dir.path().join("bench");
    args.push(p.to_str().unwrap());
    let o = svrb(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("speedup") && text.contains("hifi") && text.contains("rb-adaptive"));
    assert!(p.join("bench.csv").exists());
}
