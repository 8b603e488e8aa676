use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mdmimo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdmimo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL: &str =
    "trials = 2\nseed = 3\n[scenario]\nnum_rus = 2\n[sweep]\nvariable = \"distance_m\"\nvalues = [300]\n";

#[test]
fn validate_lists_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let text = ok(&mdmimo(&["validate", "--config", &cfg]));
    assert!(text.starts_with("ok: downlink, 2 trials"), "{text}");
    assert!(text.contains("distance_m=300;num_rus=8"));
}

#[test]
fn invalid_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario]\nnum_rrus = 2\n");
    let out = mdmimo(&["validate", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.toml"), "{err}");
    let out = mdmimo(&["downlink", "--trials", "0"]);
    assert!(!out.status.success());
}

#[test]
fn downlink_csv_is_reproducible_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&mdmimo(&[
        "downlink",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--threads",
        "1",
    ]));
    ok(&mdmimo(&[
        "downlink",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--threads",
        "2",
    ]));
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with("sweep_value,seed,metric_name,metric_value,units\n"));
    assert!(text.contains("relative_gain_of_means"));
    let manifest = fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
    assert_eq!(
        manifest,
        fs::read_to_string(dir.path().join("b.csv.manifest.json")).unwrap()
    );
}

#[test]
fn stdout_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let text = ok(&mdmimo(&[
        "downlink",
        "--config",
        &cfg,
        "--csi",
        "stale",
        "--cfo-hz",
        "100",
        "--csi-age-s",
        "0.002",
        "--sequential",
    ]));
    assert!(text.lines().count() > 1);
    let json = ok(&mdmimo(&[
        "uplink", "--config", &cfg, "--format", "json", "--trials", "1",
    ]));
    assert!(json.contains("\"manifest\"") && json.contains("\"records\""));
    let bad = mdmimo(&["downlink", "--csi", "psychic"]);
    assert!(!bad.status.success());
}

#[test]
fn rc_bench_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "trials = 2\n[rc]\nsize = 16\ntrain_steps = 200\ntest_steps = 20\n",
    );
    let text = ok(&mdmimo(&["rc-bench", "--config", &cfg]));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("seed,f_d_dt,nmse_predictor_db,nmse_persistence_db"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn mismatched_manifest_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("r.csv");
    let out = out.to_str().unwrap();
    ok(&mdmimo(&["mobility", "--config", &cfg, "--out", out, "--trials", "1"]));
    let second = mdmimo(&["mobility", "--config", &cfg, "--out", out, "--trials", "2"]);
    ok(&second);
    let err = String::from_utf8_lossy(&second.stderr);
    assert!(err.contains("different config"), "{err}");
}
