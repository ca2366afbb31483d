use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ddpol() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ddpol"));
    c.env_remove("DDPOL_THREADS");
    c
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    (status.code().expect("exited normally"), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A shipped config with `edit` applied, written into `dir`. Output paths are
/// dropped so runs only write where the test says.
fn config_with(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let text = std::fs::read_to_string(configs_dir().join(name)).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("output");
    edit(&mut v);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn bounds_prints_worked_example() {
    let (code, out, _) = run(ddpol().args(["bounds", "--mr", "2", "--mx", "4", "--my", "8"]));
    assert_eq!(code, 0);
    assert!(out.contains("kruskal") && out.contains("Kmax=7"), "{out}");
    assert!(out.contains("imdf") && out.contains("Kmax=32"), "{out}");

    let (code, out, _) = run(ddpol().args(["bounds", "--mr", "3", "--mx", "8", "--my", "8", "--n", "16", "--json"]));
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[2]["theorem"], "ctd");
    assert_eq!(v[2]["kmax"], 8);
}

#[test]
fn selftest_passes() {
    let (code, out, err) = run(ddpol().arg("selftest"));
    assert_eq!(code, 0, "{out}{err}");
    assert_eq!(out.matches("PASS").count(), 3, "{out}");
}

#[test]
fn malformed_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(dir.path(), "fig3.json", |v| v["geometry"]["mr"] = json!("two"));
    let (code, _, err) =
        run(ddpol().args(["sweep", "--seed", "1", "--out"]).arg(dir.path().join("s.csv")).arg("--config").arg(&cfg));
    assert_eq!(code, 2);
    assert!(err.contains("geometry.mr"), "{err}");

    let cfg = config_with(dir.path(), "fig3.json", |v| v["pilot"]["kind"] = json!("frugal"));
    let (code, _, err) =
        run(ddpol().args(["sweep", "--seed", "1", "--out"]).arg(dir.path().join("s.csv")).arg("--config").arg(&cfg));
    assert_eq!(code, 2);
    assert!(err.contains("pilot"), "{err}");
}

#[test]
fn infeasible_k_exits_3_citing_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(dir.path(), "fig5.json", |v| v["axis"]["values"] = json!([2, 9]));
    let (code, _, err) =
        run(ddpol().args(["sweep", "--seed", "1", "--out"]).arg(dir.path().join("s.csv")).arg("--config").arg(&cfg));
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("ctd") && err.contains("Kmax=8"), "{err}");

    let cfg = config_with(dir.path(), "fig5.json", |v| v["scenario"]["k"] = json!({"policy": "known", "k": 9}));
    let (code, _, err) = run(ddpol().args(["estimate-ctd", "--seed", "1", "--config"]).arg(&cfg));
    assert_eq!(code, 3, "{err}");
}

#[test]
fn sweep_is_byte_identical_and_has_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(dir.path(), "fig3.json", |v| v["trials"] = json!(3));
    let sweep = |out: &str, threads: Option<&str>| {
        let mut c = ddpol();
        c.args(["sweep", "--seed", "11", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join(out));
        if let Some(t) = threads {
            c.env("DDPOL_THREADS", t);
        }
        let (code, _, err) = run(&mut c);
        assert_eq!(code, 0, "{err}");
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = sweep("a.csv", None);
    let b = sweep("b.csv", None);
    let c = sweep("c.csv", Some("1"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    let text = String::from_utf8(a).unwrap();
    // 11 SNR points times two methods, plus the header.
    assert_eq!(text.lines().count(), 1 + 11 * 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0,parafac,"));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let (code, _, err) =
        run(ddpol().env("DDPOL_THREADS", "zero").args(["bounds", "--mr", "2", "--mx", "2", "--my", "2"]));
    assert_eq!(code, 2);
    assert!(err.contains("DDPOL_THREADS"), "{err}");
}

#[test]
fn synth_then_noiseless_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(dir.path(), "fig3.json", |v| v["scenario"]["k"] = json!({"policy": "known", "k": 4}));
    let out = dir.path().join("h.csv");
    let (code, _, err) = run(ddpol().args(["synth", "--seed", "5", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with('#'));
    // 2Mr = 4 rows of 2Mt = 64 complex entries.
    assert_eq!(lines.len(), 2 + 4);
    assert!(lines[2..].iter().all(|l| l.split(',').count() == 2 * 64));
    let truth: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("h.csv.truth.json")).unwrap()).unwrap();
    assert_eq!(truth["k"], 4);
    assert_eq!(truth["b"].as_array().unwrap().len(), 4);

    let (code, out, err) = run(ddpol().args(["estimate-parafac", "--seed", "5", "--json", "--config"]).arg(&cfg));
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["k_true"], 4);
    assert!(report["nmse"].as_f64().unwrap() <= 1e-8, "{out}");
    // Same seed, same draw: the estimate's truth matches the synthesized file.
    assert_eq!(report["truth"][0]["angles"], truth["angles"][0]);
}

#[test]
fn ctd_estimate_runs_on_shipped_config() {
    let (code, out, err) =
        run(ddpol().args(["estimate-ctd", "--seed", "3", "--config"]).arg(configs_dir().join("fig5.json")));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("nmse"), "{out}");
}
