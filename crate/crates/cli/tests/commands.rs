use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn tsde() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tsde"));
    c.env_remove("TSDE_OUTPUT_DIR");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL_FIG3: &str = r#"{"preset": "fig3", "horizon": 300, "reps": 2, "eval_horizon": 3000, "eval_reps": 2,
    "regret_step": 50, "mappings": ["myopic", "whittle"]}"#;

#[test]
fn frequentist_run_writes_all_files_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_FIG3);
    for out in ["a", "b"] {
        let status = tsde()
            .arg("run")
            .arg(&cfg)
            .arg("--output-dir")
            .arg(tmp.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for f in ["regret.csv", "trace.csv", "eval.csv", "manifest.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
    let regret = fs::read_to_string(tmp.path().join("a/regret.csv")).unwrap();
    let mut lines = regret.lines();
    assert_eq!(lines.next(), Some("time,regret_mean,regret_stderr,mapping"));
    assert!(lines.next().unwrap().ends_with(",myopic"));
    assert!(lines.next().unwrap().ends_with(",whittle"));
    assert!(regret.lines().last().unwrap().starts_with("300,"));
    let trace = fs::read_to_string(tmp.path().join("a/trace.csv")).unwrap();
    assert!(trace.starts_with("time,arm,posterior_weight_true,episode_index\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_changes_the_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_FIG3);
    for (out, seed) in [("a", "1"), ("b", "2")] {
        let status = tsde()
            .args(["run", "--seed", seed, "--mapping", "myopic"])
            .arg(&cfg)
            .arg("--output-dir")
            .arg(tmp.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(tmp.path().join("a/regret.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/regret.csv")).unwrap();
    assert_ne!(a, b);
    let eval = fs::read_to_string(tmp.path().join("a/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2);
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"mode": "eval-policy", "num_arms": 2, "num_active": 1, "horizon": 10,
            "theta_star": [[0.3, 0.7], [0.6, 0.4]], "eval_horizon": 2000, "eval_reps": 3}"#,
    );
    let out = tmp.path().join("env-out");
    let status = tsde()
        .arg("run")
        .arg(&cfg)
        .env("TSDE_OUTPUT_DIR", &out)
        .status()
        .unwrap();
    assert!(status.success());
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 4);
    assert!(!out.join("regret.csv").exists());
}

#[test]
fn malformed_config_exits_2_with_line_info() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        "{\n  \"mode\": \"bayesian\",\n  \"num_arms\": ,\n}",
    );
    let out = tmp.path().join("out");
    let o = tsde()
        .arg("run")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let rec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(rec["error"], "parse");
    assert_eq!(rec["line"], 3);
}

#[test]
fn invalid_config_lists_every_violation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"mode": "bayesian", "num_arms": 2, "num_active": 3, "horizon": 0, "colour": "red"}"#,
    );
    let out = tmp.path().join("out");
    let o = tsde()
        .arg("run")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8(o.stderr).unwrap();
    for key in ["colour", "num_active", "horizon"] {
        assert!(stderr.contains(key), "missing {key} in {stderr}");
    }
    let rec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(rec["violations"].as_array().unwrap().len(), 3);
}

#[test]
fn missing_config_and_preset_is_a_config_error() {
    let o = tsde()
        .args(["run", "--output-dir", "/nonexistent/never"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn slope_recovers_known_exponents() {
    let tmp = TempDir::new().unwrap();
    let mut text = String::from("time,regret_mean,regret_stderr,mapping\n");
    for t in (0..=2000).step_by(50) {
        let t = t as f64;
        text += &format!("{t},{},0,sqrt\n", 3.0 * t.sqrt());
        text += &format!("{t},{},0,linear\n", 0.2 * t);
    }
    let csv = write(tmp.path(), "synthetic.csv", &text);
    let o = tsde()
        .arg("slope")
        .arg(&csv)
        .args(["--from", "500", "--to", "2000"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("sqrt: slope 0.5000"), "{stdout}");
    assert!(stdout.contains("linear: slope 1.0000"), "{stdout}");
    assert!(stdout.contains("R^2 1.0000"));
    let loglog = fs::read_to_string(tmp.path().join("synthetic_loglog_sqrt.csv")).unwrap();
    assert!(loglog.starts_with("log_t,log_regret\n"));
    assert_eq!(loglog.lines().count(), 1 + 31);
}

#[test]
fn slope_without_mapping_column_uses_default_window() {
    let tmp = TempDir::new().unwrap();
    let csv = write(
        tmp.path(),
        "r.csv",
        "time,regret_mean\n100,10\n400,20\n1600,40\n",
    );
    let o = tsde().arg("slope").arg(&csv).output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("regret: slope 0.5000"));
    assert!(tmp.path().join("r_loglog.csv").exists());
}

#[test]
fn slope_reports_unusable_series_and_bad_files() {
    let tmp = TempDir::new().unwrap();
    let csv = write(
        tmp.path(),
        "r.csv",
        "time,regret_mean,mapping\n100,-1,a\n200,-2,a\n100,1,b\n200,2,b\n",
    );
    let o = tsde()
        .arg("slope")
        .arg(&csv)
        .args(["--from", "100"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("a: no fit"));
    assert!(stdout.contains("b: slope 1.0000"));

    let bad = write(tmp.path(), "bad.csv", "when,how\n1,2\n");
    let o = tsde().arg("slope").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
