use std::fs;
use std::process::{Command, Output};

fn clockens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clockens"))
        .args(args)
        .output()
        .expect("binary runs")
}

const CONFIG: &str = r#"
[ensemble]
clocks = 2
sigma = [0.1, 0.001]
tau = 1.0
horizon = 300

[measurement]
r = 0.01

[run]
algorithm = "jst"
"#;

#[test]
fn subcommands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    for (cmd, file) in [
        ("simulate", "trajectory.csv"),
        ("compare", "series.csv"),
        ("allan", "adev_jst.csv"),
        ("theory", "theory.csv"),
    ] {
        let o = clockens(&[cmd, "--config", cfg, "--out", out, "--seed", "5"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join("out").join(file).exists(), "{cmd} did not write {file}");
    }
    assert!(!dir.path().join("out/adev_ckf.csv").exists());
}

#[test]
fn bad_input_exits_with_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let o = clockens(&["compare", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, CONFIG.replace("r = 0.01", "r = -0.01")).unwrap();
    let o = clockens(&["compare", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("measurement.r"));

    let o = clockens(&["bench", "--m", "1", "--repeats", "1"]);
    assert!(!o.status.success());
    assert!(!clockens(&["frobnicate"]).status.success());
}

#[test]
fn bench_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = clockens(&["bench", "--m", "2,4", "--repeats", "2", "--horizon", "20", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(
        table.lines().next(),
        Some("m,jst_mean,ckf_mean,jst_median_of_means,ckf_median_of_means")
    );
    assert_eq!(table.lines().count(), 3);
}
