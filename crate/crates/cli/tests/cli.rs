use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lmbtrack"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[scenario]\nduration = 3\nseed = 4\n\n[filter]\ntrack_particles = 100\n\n\
         [birth]\nnum_chains = 4\nposterior_particles = 100\n\n[birth.prior]\nnum_particles = 100\n",
    )
    .unwrap();
    path
}

#[test]
fn run_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let dump = dir.path().join("scenario.txt");
    let base = dir.path().join("base");
    let all = dir.path().join("all");

    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&base)
        .arg("--dump-scenario")
        .arg(&dump)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(base.join("summary.json").exists());
    assert!(base.join("steps.csv").exists());

    let status = bin()
        .args(["run", "--all-on", "--gate", "euclidean:2000", "--label", "all", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&all)
        .arg("--scenario")
        .arg(&dump)
        .status()
        .unwrap();
    assert!(status.success());

    let out = dir.path().join("cmp");
    let output = bin()
        .args(["compare", "--baseline"])
        .arg(&base)
        .arg("--candidates")
        .arg(&all)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("label,wall_time_reduction"));
    assert!(csv.lines().nth(1).unwrap().starts_with("all,"));
}

#[test]
fn seed_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        let ok = bin().args(["run", "--seed", seed, "--config"]).arg(&cfg).arg("--out").arg(out).status().unwrap();
        assert!(ok.success());
    }
    let output = bin()
        .args(["compare", "--baseline"])
        .arg(&a)
        .arg("--candidates")
        .arg(&b)
        .arg("--out")
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("different scenario seeds"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[scenario]\nduraton = 3\n").unwrap();
    let output = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn bad_gate_spec_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let output = bin().args(["run", "--gate", "hexagonal:3", "--config"]).arg(&cfg).output().unwrap();
    assert!(!output.status.success());
}
