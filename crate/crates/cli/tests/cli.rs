use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vhj_cli::compare::compare;
use vhj_cli::config::{ExperimentConfig, OracleKind, Overrides, Preset, Stage};
use vhj_cli::pipeline::{run, Report, EXIT_ASSUMPTIONS, EXIT_OK, EXIT_VERDICT};

fn vhj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vhj")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn load_str(text: &str, ov: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let dir = TempDir::new().unwrap();
    ExperimentConfig::load(Some(&write(dir.path(), "c.toml", text)), ov)
}

fn read_report(dir: &Path) -> Report {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn smoke(problem: &str, out: &Path, seed: u64) -> ExperimentConfig {
    let ov = Overrides { problem: Some(problem.into()), out: Some(out.into()), seed: Some(seed), ..Overrides::default() };
    ExperimentConfig::load(None, &ov).unwrap()
}

#[test]
fn preset_fills_only_what_the_file_leaves_open() {
    let cfg = ExperimentConfig::load(None, &Overrides::default()).unwrap();
    assert_eq!((cfg.monte_carlo.n_paths, cfg.grid.steps), Preset::Smoke.scale());
    assert_eq!(cfg.ladder.schedule, vec![1.0, 2.0, 4.0, 8.0, 16.0]);

    let ov = Overrides { preset: Some(Preset::Acceptance), seed: Some(9), ..Overrides::default() };
    let cfg = load_str("[monte_carlo]\nn_paths = 3000\nseed = 4\n", &ov).unwrap();
    assert_eq!(cfg.monte_carlo.n_paths, 3000);
    assert_eq!(cfg.grid.steps, 50);
    assert_eq!(cfg.monte_carlo.seed, 9, "flags beat the file");
    assert_eq!(cfg.ladder.schedule.last(), Some(&64.0));

    let cfg = load_str("[ladder]\nschedule = [1.0, 3.0]\n", &Overrides { stages: Some(vec![Stage::Ladder]), ..Overrides::default() }).unwrap();
    assert_eq!(cfg.ladder.schedule, vec![1.0, 3.0]);
}

#[test]
fn zero_horizon_is_rejected_before_running() {
    let err = load_str("[grid]\nhorizon = 0.0\n", &Overrides::default()).unwrap_err();
    assert!(format!("{err:#}").contains("horizon"), "{err:#}");
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", "[grid]\nhorizon = 0.0\n");
    let out = vhj(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_keys_point_at_the_line() {
    let err = load_str("problem = \"kpz\"\n\n[grid]\nstep = 3\n", &Overrides::default()).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("step") && msg.contains("line 4"), "{msg}");
}

#[test]
fn other_config_rejections() {
    assert!(load_str("[monte_carlo]\nn_paths = 1\n", &Overrides::default()).is_err());
    assert!(load_str("preset = \"acceptance\"\n[monte_carlo]\nn_paths = 500\n", &Overrides::default()).is_err());
    assert!(load_str("problem = \"custom\"\n", &Overrides::default()).is_err());
    let err = load_str("[dual]\nn = 32.0\n", &Overrides::default()).unwrap_err();
    assert!(err.to_string().contains("schedule"));
    // dual.n only matters when the dual stage runs
    assert!(load_str("[dual]\nn = 32.0\n", &Overrides { stages: Some(vec![Stage::Ladder]), ..Overrides::default() }).is_ok());
    let mut cfg = smoke("kpz", Path::new("unused"), 1);
    cfg.points = vec![start_at(1.0)];
    assert!(run(cfg).is_err(), "t = T is not a start point");
}

fn start_at(t: f64) -> vhj_cli::config::EvalPoint {
    vhj_cli::config::EvalPoint { t, ..Default::default() }
}

#[test]
fn smoke_run_writes_report_and_summary() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().join("lq");
    let out = vhj(&["run", "--problem", "lq", "--oracle", "riccati", "--dump-paths", "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("PASS oracle[0]")), "{stdout}");

    let rep = read_report(&o);
    assert_eq!(rep.exit_code, EXIT_OK);
    assert_eq!(rep.ladders[0].report.levels.len(), 5);
    assert_eq!(rep.oracle[0].kind, OracleKind::Riccati);
    assert!((rep.oracle[0].value - 0.433_780_830).abs() < 1e-6);
    assert!(rep.dual.as_ref().unwrap().lower_ok);

    let mut csv = csv::Reader::from_path(o.join("summary.csv")).unwrap();
    let header: Vec<String> = csv.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[header.len() - 2..], ["riccati_value", "riccati_delta"]);
    assert_eq!(csv.records().count(), 5);
    assert!(o.join("paths_0.bin").exists());
}

fn without_timestamp(text: &str) -> String {
    text.lines().filter(|l| !l.trim_start().starts_with("\"timestamp\"")).collect::<Vec<_>>().join("\n")
}

#[test]
fn same_seed_gives_the_same_report() {
    let dir = TempDir::new().unwrap();
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let o = dir.path().join(name);
        let out = vhj(&["run", "--problem", "kpz", "--seed", "5", "--out", o.to_str().unwrap()]);
        assert!(out.status.code().is_some());
        // the output directory is part of the recorded config
        texts.push(std::fs::read_to_string(o.join("report.json")).unwrap().replace(o.to_str().unwrap(), "OUT"));
    }
    assert_eq!(without_timestamp(&texts[0]), without_timestamp(&texts[1]));
}

#[test]
fn compare_identical_reports() {
    let dir = TempDir::new().unwrap();
    let rep = run(smoke("kpz", dir.path(), 3)).unwrap();
    let c = compare(&rep, &rep).unwrap();
    assert!(!c.seed_mismatch);
    assert!(c.config_diffs.is_empty() && c.structural.is_empty());
    assert!(!c.metrics.is_empty());
    assert!(c.metrics.iter().all(|m| m.delta == 0.0 && m.consistent));
    assert!(c.all_consistent);
}

#[test]
fn compare_across_seeds() {
    let dir = TempDir::new().unwrap();
    let a = run(smoke("lq", &dir.path().join("a"), 1)).unwrap();
    let b = run(smoke("lq", &dir.path().join("b"), 2)).unwrap();
    let c = compare(&a, &b).unwrap();
    assert!(c.seed_mismatch);
    assert!(c.config_diffs.is_empty(), "{:?}", c.config_diffs);
    assert!(c.structural.is_empty());
    for m in &c.metrics {
        assert_eq!(m.delta, m.b - m.a);
        assert_eq!(m.consistent, m.delta.abs() <= 3.0 * m.combined_stderr, "{m:?}");
    }
    let u = c.metrics.iter().find(|m| m.name == "point0.final_u").unwrap();
    assert!(u.delta != 0.0 && u.combined_stderr > 0.0);
    assert!(u.consistent, "{u:?}");
}

#[test]
fn compare_flags_structural_differences() {
    let dir = TempDir::new().unwrap();
    let a = run(smoke("kpz", &dir.path().join("a"), 1)).unwrap();
    let mut cfg = smoke("kpz", &dir.path().join("b"), 1);
    cfg.ladder.schedule = vec![1.0, 2.0, 4.0];
    cfg.stages.retain(|s| *s != Stage::Dual);
    let b = run(cfg).unwrap();
    let c = compare(&a, &b).unwrap();
    assert!(c.structural.iter().any(|s| s.contains("schedule")), "{:?}", c.structural);
    assert!(c.structural.iter().any(|s| s.contains("dual")));
    assert!(c.config_diffs.contains(&"ladder.schedule".to_string()), "{:?}", c.config_diffs);
    // shared levels are still compared, and agree exactly under the same seed
    let u1 = c.metrics.iter().find(|m| m.name == "point0.u[n=1]").unwrap();
    assert_eq!(u1.delta, 0.0);

    let mut other = b.clone();
    other.schema_version += 1;
    assert!(compare(&a, &other).unwrap_err().to_string().contains("schema"));
}

#[test]
fn compare_subcommand() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().join("r");
    vhj(&["run", "--problem", "lq", "--stages", "validate,forward,ladder", "--out", o.to_str().unwrap()]);
    let report = o.join("report.json");
    let cmp = dir.path().join("cmp.json");
    let out = vhj(&["compare", report.to_str().unwrap(), report.to_str().unwrap(), "--out", cmp.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cmp).unwrap()).unwrap();
    assert_eq!(v["all_consistent"], true);
    let out = vhj(&["compare", report.to_str().unwrap(), dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

const BAD_GROWTH: &str = r#"{
    "name": "quad", "dim": 1, "horizon": 1.0,
    "drift": {"matrix": [[0.0]], "offset": [0.0]},
    "sigma": {"constant": [[1.0]]},
    "rho": {"constant": [[1.0]]},
    "hamiltonian": {"z_terms": [{"coef": 0.5, "power": 2.0}]},
    "terminal": {"terms": [{"coef": 1.0, "exponents": [2]}]},
    "growth": {"p_rho": 0.0, "p": 2.0, "q": 2.0, "p_f": 0.0, "q_f": 2.0, "p_g": 0.0, "q_g": 2.0,
               "m_f": 1.0, "big_m_f": 1.0, "m_g": 0.0, "big_m_g": 1.0, "l_f": 0.0, "m_rho": 1.0, "l_coef": 0.0}
}"#;

#[test]
fn failed_assumptions_exit_2() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "quad.json", BAD_GROWTH);
    let cfg = write(dir.path(), "c.toml", &format!("problem = \"custom\"\ncustom_spec = {:?}\n", spec.to_str().unwrap()));
    let o = dir.path().join("o");
    let out = vhj(&["run", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_ASSUMPTIONS));
    let rep = read_report(&o);
    assert!(rep.ladders.is_empty() && rep.forward.is_empty());
    let v = rep.validation.unwrap();
    assert!(v.failures().any(|f| f.check.starts_with("q_F")));
}

#[test]
fn failed_verdict_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", "stages = [\"ladder\", \"oracle\"]\n[oracle]\nkind = \"cole_hopf\"\nabs_tol = 0.0\nrel_tol = 0.0\n");
    let o = dir.path().join("o");
    let out = vhj(&["run", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_VERDICT));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL oracle[0]"));
    let mut csv = csv::Reader::from_path(o.join("summary.csv")).unwrap();
    assert!(csv.headers().unwrap().iter().any(|h| h == "cole_hopf_delta"));
}

#[test]
fn oracle_must_fit_the_problem() {
    let dir = TempDir::new().unwrap();
    let mut cfg = smoke("lq", dir.path(), 1);
    cfg.oracle.kind = OracleKind::ColeHopf;
    assert!(run(cfg).is_err());
}

#[test]
fn fd_oracle_on_kpz() {
    let dir = TempDir::new().unwrap();
    let mut cfg = smoke("kpz", dir.path(), 1);
    cfg.stages = vec![Stage::Oracle];
    cfg.oracle.kind = OracleKind::Fd;
    let rep = run(cfg).unwrap();
    assert!((rep.oracle[0].value - 0.483_298_942).abs() < 2e-3, "{}", rep.oracle[0].value);
    assert_eq!(rep.oracle[0].delta, None);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(vhj(&["run", "--preset", "huge"]).status.code(), Some(1));
    assert_eq!(vhj(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vhj(&["--help"]).status.code(), Some(0));
    assert_eq!(vhj(&["run", "--problem", "nope", "--out", "/nonexistent/x"]).status.code(), Some(1));
}
