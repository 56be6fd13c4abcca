use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfkin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfkin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SIMULATE: &str = r#"
scenario = "simulate"
N = 30

[initial]
preset = "monodisperse"
rho = 1.0

[integrator]
t_end = 2.0
observer_cadence = 0.25
"#;

#[test]
fn simulate_writes_series_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let out = dir.path().join("out");
    let o = cfkin(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,mass,c1,V,F_z,D_CF,D_BD,M_2mlambda,dist_eq,tail_mass,clamped_mass"
    );
    assert_eq!(lines.count(), 9);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = cfkin(&["simulate", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["diagnostics.csv", "report.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SIMULATE}\nbogus_key = 3\n"));
    let o = cfkin(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = cfkin(&["rate-study", "--config", "/nonexistent/run.toml"]);
    assert_ne!(o.status.code(), Some(0));
    let o = cfkin(&["convergence-study"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn equilibrium_with_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cfkin(&[
        "equilibrium",
        "--rho",
        "2",
        "--n",
        "50",
        "--profile",
        "--out",
        out,
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["regime"], "subcritical");
    let z = report["z"].as_f64().unwrap();
    assert!(z > 0.0 && z < (-1.0f64).exp());
    let profile = fs::read_to_string(dir.path().join("equilibrium_profile.csv")).unwrap();
    assert_eq!(profile.lines().count(), 51);
}

#[test]
fn probe_with_seed_override_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for path in [&a, &b] {
        let o = cfkin(&[
            "probe",
            "--suite",
            "tail_sum",
            "--trials",
            "200",
            "--seed",
            "11",
            "--out",
            dir.path().to_str().unwrap(),
            "--report",
            path.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(v["seed"], 11);
}

#[test]
fn unknown_suite_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfkin(&[
        "probe",
        "--suite",
        "nope",
        "--trials",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn truncation_study_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
scenario = "truncation_study"
N = 40

[initial]
preset = "monodisperse"
rho = 1.0

[integrator]
t_end = 1.0
observer_cadence = 0.5

[study]
n_list = [10, 20, 40]
"#,
    );
    let o = cfkin(&[
        "truncation-study",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert_eq!(
        o.status.code(),
        Some(if report["passed"] == true { 0 } else { 1 })
    );
}

#[test]
fn rate_study_rejects_supercritical_mass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
scenario = "rate_study"
N = 20
rho_units = "critical_mass"

[initial]
preset = "monodisperse"
rho = 2.0
"#,
    );
    let o = cfkin(&[
        "rate-study",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_mass_convergence_study_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
scenario = "convergence_study"
N = 20

[initial]
preset = "monodisperse"
rho = 0.0
"#,
    );
    let o = cfkin(&[
        "convergence-study",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = cfkin_core::scenario::parse_config(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
    }
}
