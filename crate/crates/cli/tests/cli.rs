//! Exit codes, determinism and artifact shape of the `oclab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn defaults(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../defaults").join(name)
}

fn oclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oclab")).args(args).output().expect("spawn oclab")
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    oclab(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Loads a default config, applies `edit` and writes it into `dir`.
fn edited(dir: &Path, name: &str, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let text = std::fs::read_to_string(defaults(name)).unwrap();
    let mut table: toml::Table = text.parse().unwrap();
    edit(&mut table);
    let path = dir.join(name);
    std::fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

fn section<'a>(t: &'a mut toml::Table, key: &str) -> &'a mut toml::Table {
    t.get_mut(key).and_then(|v| v.as_table_mut()).unwrap()
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn unknown_field_is_a_config_error_naming_it() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "synthesize.config", |t| {
        section(t, "clf").insert("radius".into(), toml::Value::Float(1.0));
    });
    let o = run("synthesize", &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("radius"), "{}", stderr(&o));
}

#[test]
fn wrong_weight_shape_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "synthesize.config", |t| {
        section(t, "clf").insert("q".into(), toml::Value::try_from(vec![vec![1.0]]).unwrap());
    });
    let o = run("synthesize", &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("clf.q"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&oclab(&["solve-everything", "--config", "x"])), 1);
    assert_eq!(code(&oclab(&["fig1"])), 1);
    assert_eq!(code(&oclab(&["fig1", "--config", "x", "--bogus"])), 1);
    assert_eq!(code(&oclab(&["--help"])), 0);
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let o = oclab(&["synthesize", "--config", defaults("synthesize.config").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("out"));
}

#[test]
fn synthesize_is_deterministic_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = defaults("synthesize.config");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run("synthesize", &cfg, &a)), 0);
    assert_eq!(code(&run("synthesize", &cfg, &b)), 0);
    let ja = std::fs::read(a.join("clf.json")).unwrap();
    assert_eq!(ja, std::fs::read(b.join("clf.json")).unwrap());

    let v: serde_json::Value = serde_json::from_slice(&ja).unwrap();
    let clf = &v["clf"];
    let s3 = 3f64.sqrt();
    assert!((clf["c1"].as_f64().unwrap() - (s3 - 1.0)).abs() < 1e-9);
    assert!((clf["c2"].as_f64().unwrap() - (s3 + 1.0)).abs() < 1e-9);
    assert_eq!(clf["certificate"]["violations"].as_u64(), Some(0));

    let c = dir.path().join("c");
    let o = oclab(&[
        "synthesize",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_eq!(code(&o), 0);
    let vc: serde_json::Value = serde_json::from_slice(&std::fs::read(c.join("clf.json")).unwrap()).unwrap();
    assert_eq!(vc["config"]["seed"].as_u64(), Some(11));
}

#[test]
fn fig1_default_passes_and_writes_well_formed_svg() {
    let dir = TempDir::new().unwrap();
    let o = run("fig1", &defaults("fig1.config"), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["value_field.csv", "residuals.csv", "trajectories.csv", "envelopes.csv", "clf.json", "bounds.json"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let svg = std::fs::read_to_string(dir.path().join("fig1.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));
    let bounds: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("bounds.json")).unwrap()).unwrap();
    assert_eq!(bounds["status"], "passed");
}

#[test]
fn fig1_with_a_loose_tolerance_fails_its_scans() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "fig1.config", |t| {
        section(t, "solver").insert("tol".into(), toml::Value::Float(1.0));
    });
    let o = run("fig1", &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn fig2_from_the_origin_stays_flat() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "fig2.config", |t| {
        section(t, "shooting").insert("x0".into(), toml::Value::try_from(vec![0.0; 4]).unwrap());
    });
    let out = dir.path().join("out");
    let o = run("fig2", &cfg, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let traj = out.join("trajectories.csv");
    for col in ["x0", "x1", "x2", "x3", "V", "cost_to_go"] {
        assert!(csv_column(&traj, col).iter().all(|v| *v == 0.0), "{col} not flat");
    }
}

#[test]
fn fig2_with_no_budget_is_flagged() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "fig2.config", |t| {
        section(t, "shooting").insert("budget".into(), toml::Value::Integer(1));
    });
    let out = dir.path().join("out");
    let o = run("fig2", &cfg, &out);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bounds.json")).unwrap()).unwrap();
    assert_eq!(report["failed"], true);
}

#[test]
fn fig2_rejects_a_start_outside_the_certified_ball() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "fig2.config", |t| {
        section(t, "shooting").insert("x0".into(), toml::Value::try_from(vec![0.0, 0.5, 0.0, 0.0]).unwrap());
    });
    let o = run("fig2", &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("shooting.x0"), "{}", stderr(&o));
}

#[test]
fn infeasible_practical_config_exits_four_without_solving() {
    let dir = TempDir::new().unwrap();
    let o = run("fig3", &defaults("fig3_practical_infeasible.config"), dir.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(dir.path().join("feasibility.json").is_file());
    assert!(!dir.path().join("practical_dt").exists());
    assert!(!dir.path().join("fig3.svg").exists());
    let f: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("feasibility.json")).unwrap()).unwrap();
    assert_eq!(f[0]["feasible"], false);
    assert!(f[0]["q_cbar"].as_f64().unwrap() >= 1.0);
}

#[test]
fn fig3_practical_default_passes() {
    let dir = TempDir::new().unwrap();
    let o = run("fig3", &defaults("fig3_practical.config"), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("fig3.svg")).unwrap();
    roxmltree::Document::parse(&svg).expect("well-formed SVG");
    assert!(dir.path().join("practical_dt/value_field.csv").is_file());
}

#[test]
fn negative_disturbance_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "robustness.config", |t| {
        section(t, "robustness").insert("d_bar".into(), toml::Value::try_from(vec![0.0, -0.01]).unwrap());
    });
    let o = run("robustness", &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("robustness.d_bar"), "{}", stderr(&o));
}

#[test]
fn continuous_cost_on_a_discretized_system_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = edited(dir.path(), "fig3.config", |t| {
        let costs = t.get_mut("costs").and_then(|v| v.as_array_mut()).unwrap();
        let first = costs[0].as_table_mut().unwrap();
        first.insert("variant".into(), toml::Value::String("nominal_ct".into()));
    });
    let o = run("fig3", &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("costs[0]"), "{}", stderr(&o));
}
