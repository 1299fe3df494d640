use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qscatter(args: &[&str], workers: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qscatter"));
    cmd.args(args).env_remove("QSCATTER_WORKERS");
    if let Some(n) = workers {
        cmd.env("QSCATTER_WORKERS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, output: &str, extra: &str) -> String {
    let text = format!(
        "scenario = \"no_medium\"\nseed = 21\noutput = \"{output}\"\nframes = 200000\n{extra}\
         [pixel_set]\nd = 9\nspacing = 2\n"
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn state_of(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout.lines().find_map(|l| l.strip_prefix("state=")).expect("state line").to_string()
}

#[test]
fn malformed_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "out", "framez = 3\n");
    let out = qscatter(&["run", "--config", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration"));
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("noseed.toml");
    fs::write(&path, "scenario = \"no_medium\"\noutput = \"out\"\n").unwrap();
    let out = qscatter(&["run", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qscatter(&["emit-figures", "--run", tmp.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("emit-figures"));
}

#[test]
fn pixel_set_larger_than_sensor_fails_in_certify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "big.toml", "out", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("d = 9", "d = 300");
    fs::write(&cfg, text).unwrap();
    let out = qscatter(&["run", "--config", &cfg], None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    let a = write_config(&tmp.path().join("a"), "c.toml", "run", "");
    let b = write_config(&tmp.path().join("b"), "c.toml", "run", "");
    let first = qscatter(&["run", "--config", &a], Some(1));
    let second = qscatter(&["--workers", "3", "run", "--config", &b], None);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(second.status.success());
    assert_eq!(state_of(&first), state_of(&second));
    let manifest = |d: &str| fs::read_to_string(tmp.path().join(d).join("manifest.sha256")).unwrap();
    assert_eq!(manifest("a/run"), manifest("b/run"));
    assert!(manifest("a/run").contains("summary.json"));
}

#[test]
fn different_seeds_give_different_states() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.toml", "run_a", "");
    let b = write_config(tmp.path(), "b.toml", "run_b", "");
    fs::write(&b, fs::read_to_string(&b).unwrap().replace("seed = 21", "seed = 22")).unwrap();
    let first = qscatter(&["run", "--config", &a], Some(1));
    let second = qscatter(&["run", "--config", &b], Some(1));
    assert_ne!(state_of(&first), state_of(&second));
}

#[test]
fn emit_figures_writes_every_panel() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "f.toml", "run", "");
    assert!(qscatter(&["run", "--config", &cfg], Some(1)).status.success());
    let run = tmp.path().join("run");
    let out = qscatter(&["emit-figures", "--run", run.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fig = run.join("figures");
    for basis in ["position", "momentum"] {
        for panel in ["intensity", "sum", "minus"] {
            let text = fs::read_to_string(fig.join(format!("{basis}_{panel}.csv"))).unwrap();
            let rows = text.lines().count();
            let expected = if panel == "intensity" { 16 } else { 31 };
            assert_eq!(rows, expected, "{basis}_{panel}");
        }
        let matrix = fs::read_to_string(fig.join(format!("{basis}_matrix.csv"))).unwrap();
        assert_eq!(matrix.lines().count(), 9);
        assert!(matrix.lines().all(|l| l.split(',').count() == 9));
    }
    let curve = fs::read_to_string(fig.join("dimension_vs_frames.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("frames,f_tilde,certified_r"));
    assert!(curve.lines().count() >= 2);
}

#[test]
fn subcommands_compose_on_run_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", "run", "keep_frames = true\n");
    assert!(qscatter(&["run", "--config", &cfg], Some(1)).status.success());
    let run = tmp.path().join("run");
    let p = |n: &str| run.join(n).to_str().unwrap().to_string();
    let epr = qscatter(&["analyze-epr", "--position", &p("jpd_position.jpd"), "--momentum", &p("jpd_momentum.jpd")], None);
    assert!(epr.status.success(), "{}", String::from_utf8_lossy(&epr.stderr));
    let cert = qscatter(
        &["certify", "--position", &p("jpd_position.jpd"), "--momentum", &p("jpd_momentum.jpd"), "--d", "9"],
        None,
    );
    assert!(cert.status.success(), "{}", String::from_utf8_lossy(&cert.stderr));
    let cal = tmp.path().join("cal");
    let out = qscatter(&["calibrate", "--dark", &p("frames_dark.bin"), "--out", cal.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cal.join("crosstalk_kernel.csv").is_file());
}
