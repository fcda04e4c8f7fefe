//! CLI acceptance: determinism of the selftest manifest (run twice with the
//! same seed, compare bytes) plus the documented exit-code contract and the
//! headline command examples.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_epstein-lab"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// Criterion 11 — identical config and seed reproduce the manifest (and every
/// emitted file) byte for byte.
#[test]
fn c11_selftest_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let status = bin()
            .args(["selftest", "--seed", "42", "--out"])
            .arg(&dir)
            .status()
            .unwrap();
        assert!(status.success(), "selftest failed");
        dir
    };
    let a = run("a");
    let b = run("b");
    let ma = read(&a.join("manifest.json"));
    let mb = read(&b.join("manifest.json"));
    assert_eq!(ma, mb, "manifests differ between identical runs");
    assert_eq!(read(&a.join("selftest.csv")), read(&b.join("selftest.csv")));
    println!("criterion 11 PASS: {} manifest bytes identical", ma.len());
}

#[test]
fn fuchsian_homogeneous_family_exits_zero_with_tiny_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cmc");
    let status = bin()
        .args([
            "cmc-foliate",
            "--backend",
            "homogeneous",
            "--phi-scale",
            "0",
            "--h-lo",
            "-0.9",
            "--h-hi",
            "0.9",
            "--steps",
            "19",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&out.join("manifest.json"))).unwrap();
    let residual = manifest["stages"][0]["metrics"]["max_newton_residual"]
        .as_f64()
        .unwrap();
    assert!(residual < 1e-12, "residual {residual}");
    // Every leaf is listed in the CSV.
    let csv = String::from_utf8(read(&out.join("leaves.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 20);
}

#[test]
fn torus_critical_square_pair_returns_i() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tc");
    let status = bin()
        .args(["torus-critical", "--F", "1", "0", "1", "--G", "0", "1", "1"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let result: serde_json::Value =
        serde_json::from_slice(&read(&out.join("critical.json"))).unwrap();
    let tau_re = result["tau"][0].as_f64().unwrap();
    let tau_im = result["tau"][1].as_f64().unwrap();
    assert!(
        (tau_re.abs().powi(2) + (tau_im - 1.0).powi(2)).sqrt() < 1e-8,
        "tau = {tau_re} + {tau_im} i"
    );
}

#[test]
fn malformed_config_exits_two_with_field_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let output = bin()
        .args(["torus-critical", "--F", "1", "0", "oops", "--G", "0", "1", "1"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("`F`"), "diagnostic must name the field: {stderr}");

    // Same contract through the JSON-config entry point.
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"command": "cmc-foliate", "config": {"tol": -1}}"#).unwrap();
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("bad2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn run_from_config_document_matches_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"command": "torus-critical", "config": {"f_class": [1, 0], "f_weight": 1.0, "g_class": [0, 1], "g_weight": 1.0}}"#,
    )
    .unwrap();
    let out = tmp.path().join("fromcfg");
    let status = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("critical.json").exists());
}

#[test]
fn certificate_failure_exits_one() {
    // A φ far outside the small-data regime: the continuation or the
    // certificate must fail, and the process reports it with exit code 1.
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .args([
            "cmc-foliate",
            "--backend",
            "disk",
            "--phi-scale",
            "0.6",
            "--h-lo",
            "-0.8",
            "--h-hi",
            "0.8",
            "--steps",
            "3",
            "--ntheta",
            "32",
            "--nxi",
            "16",
        ])
        .arg("--out")
        .arg(tmp.path().join("fail"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn flat_periods_on_the_octagon() {
    let tmp = tempfile::tempdir().unwrap();
    let surface = tmp.path().join("octagon.json");
    // Regular octagon, opposite sides identified.
    let mut polys = Vec::new();
    for k in 0..8 {
        let th = (2.0 * k as f64 + 1.0) * std::f64::consts::PI / 8.0;
        polys.push([th.cos(), th.sin()]);
    }
    let doc = serde_json::json!({
        "polygons": [polys],
        "pairings": [[[0, 0], [0, 4]], [[0, 1], [0, 5]], [[0, 2], [0, 6]], [[0, 3], [0, 7]]],
    });
    std::fs::write(&surface, serde_json::to_string(&doc).unwrap()).unwrap();
    let cycles = tmp.path().join("cycles.json");
    std::fs::write(&cycles, "[[[0, 0, 1]], [[0, 1, 1]], [[0, 2, 1]], [[0, 3, 1]]]").unwrap();
    let out = tmp.path().join("periods");
    let status = bin()
        .arg("flat-periods")
        .arg("--surface")
        .arg(&surface)
        .arg("--cycles")
        .arg(&cycles)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let result: serde_json::Value =
        serde_json::from_slice(&read(&out.join("periods.json"))).unwrap();
    assert_eq!(result["genus"], 2);
    assert_eq!(result["zero_orders"], serde_json::json!([4]));
}

#[test]
fn remaining_commands_run_clean() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, args) in [
        ("surface", vec!["epstein-surface", "--metric", "poincare", "--scale", "0.5"]),
        ("minimal", vec!["minimal-path", "--detq-scale", "1.0", "--subdiv", "2"]),
        ("halfpipe", vec!["halfpipe-limit"]),
        ("line", vec!["torus-line", "--F", "2", "1", "1.3", "--G", "-1", "1", "0.7"]),
    ] {
        let out = tmp.path().join(name);
        let output = bin().args(&args).arg("--out").arg(&out).output().unwrap();
        assert!(
            output.status.success(),
            "{name} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        assert!(out.join("manifest.json").exists());
        assert!(out.join("timing.txt").exists());
    }
}

#[test]
fn thread_cap_env_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["selftest", "--seed", "1"])
        .arg("--out")
        .arg(tmp.path().join("threads"))
        .env("EPSTEIN_LAB_THREADS", "bogus")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let ok = bin()
        .args(["selftest", "--seed", "1"])
        .arg("--out")
        .arg(tmp.path().join("threads2"))
        .env("EPSTEIN_LAB_THREADS", "2")
        .status()
        .unwrap();
    assert!(ok.success());
}
