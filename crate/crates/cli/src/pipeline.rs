use std::fs::File;
use std::io::BufWriter;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vhj_core::bsde::{run_ladder_on, FeedbackPolicy, LadderReport};
use vhj_core::dual::{dual_sandwich, nu_star, Control, GammaSource, NuTable, SandwichReport};
use vhj_core::forward::{moment_diagnostics, simulate_with, MomentReport, SimOptions, TimeGrid};
use vhj_core::oracles::{cole_hopf_kpz, fd_hjb_1d_saturated, riccati_lq, FDGrid1D};
use vhj_core::problem::{default_lq, validate, LqParams, ProblemSpec, ValidationReport, KPZ_LAMBDA};
use vhj_core::stats::Estimate;

use crate::config::{ExperimentConfig, OracleKind, Stage};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSUMPTIONS: i32 = 2;
pub const EXIT_VERDICT: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardEntry {
    pub point: usize,
    pub flagged: usize,
    pub moments: MomentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLadder {
    pub point: usize,
    pub report: LadderReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub point: usize,
    pub kind: OracleKind,
    pub value: f64,
    /// Final ladder value, when the ladder ran.
    pub u_mc: Option<Estimate>,
    pub delta: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Seconds since the Unix epoch; the only field that differs between
    /// runs of the same config.
    pub timestamp: u64,
    pub config: ExperimentConfig,
    pub problem: String,
    pub validation: Option<ValidationReport>,
    pub forward: Vec<ForwardEntry>,
    pub ladders: Vec<PointLadder>,
    pub dual: Option<SandwichReport>,
    pub oracle: Vec<OracleEntry>,
    pub verdicts: Vec<Verdict>,
    pub exit_code: i32,
}

impl Report {
    fn verdict(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.verdicts.push(Verdict { name: name.into(), pass, detail: detail.into() });
    }
}

/// What the dual stage needs from the ladder level `dual.n` at point 0.
struct DualSeed {
    table: NuTable,
    policy: Arc<FeedbackPolicy>,
    u_n: Estimate,
}

/// Runs the enabled stages. Files are written by [`write_outputs`].
pub fn run(mut cfg: ExperimentConfig) -> Result<Report> {
    let spec = cfg.build_problem()?;
    cfg.resolve_points(&spec)?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut rep = Report {
        schema_version: SCHEMA_VERSION,
        timestamp,
        config: cfg.clone(),
        problem: spec.name.clone(),
        validation: None,
        forward: Vec::new(),
        ladders: Vec::new(),
        dual: None,
        oracle: Vec::new(),
        verdicts: Vec::new(),
        exit_code: EXIT_OK,
    };
    let on = |s: Stage| cfg.stages.contains(&s);

    if on(Stage::Validate) {
        let v = validate(&spec, &cfg.validation)?;
        let failed: Vec<String> = v.failures().map(|f| f.check.clone()).collect();
        rep.verdict("validation", failed.is_empty(), failed.join("; "));
        rep.validation = Some(v);
        if !failed.is_empty() {
            rep.exit_code = EXIT_ASSUMPTIONS;
            return Ok(rep);
        }
    }

    let sim = SimOptions { n_paths: cfg.monte_carlo.n_paths, seed: cfg.monte_carlo.seed, antithetic: cfg.monte_carlo.antithetic };
    let mut dual_seed: Option<DualSeed> = None;
    if on(Stage::Forward) || on(Stage::Ladder) {
        for (i, p) in cfg.points.iter().enumerate() {
            let grid = TimeGrid::new(p.t, spec.horizon, cfg.grid.steps)?;
            let bundle = simulate_with(&spec, &grid, &p.x, &p.a, &sim)?;
            log::info!("point {i}: simulated {} paths, {} flagged", bundle.n_paths, bundle.flagged.len());
            if on(Stage::Forward) {
                let moments = moment_diagnostics(&bundle, &spec, 2.0)?;
                rep.verdict(format!("forward.moments[{i}]"), moments.pass, format!("fitted constant {:.4}", moments.fitted_c));
                rep.forward.push(ForwardEntry { point: i, flagged: bundle.flagged.len(), moments });
                if cfg.dump_paths {
                    std::fs::create_dir_all(&cfg.out)?;
                    let path = cfg.out.join(format!("paths_{i}.bin"));
                    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                    bundle.write_to(&mut w)?;
                }
            }
            if on(Stage::Ladder) {
                let want_dual = i == 0 && on(Stage::Dual);
                let mut err = None;
                let report = run_ladder_on(&spec, &bundle, &cfg.ladder, &cfg.regression, |sol, train| {
                    if want_dual && sol.n == cfg.dual.n {
                        match nu_star(sol, train, &cfg.dual.nu_star) {
                            Ok(table) => dual_seed = Some(DualSeed { table, policy: sol.policy.clone(), u_n: sol.u_estimate }),
                            Err(e) => err = Some(e),
                        }
                    }
                })?;
                if let Some(e) = err {
                    return Err(e.into());
                }
                rep.verdict(format!("ladder.monotone[{i}]"), report.monotone, format!("violations {:?}", report.violations));
                rep.verdict(format!("ladder.mass_monotone[{i}]"), report.mass_monotone, "");
                rep.ladders.push(PointLadder { point: i, report });
            }
        }
    }

    if on(Stage::Dual) {
        let Some(seed) = dual_seed else {
            bail!("the dual stage needs the ladder to reach n = {} (stopped early or not run)", cfg.dual.n);
        };
        let p = &cfg.points[0];
        let n = cfg.dual.n;
        let mut e1 = vec![0.0; spec.dim];
        e1[0] = n;
        let trials = vec![
            ("zero".to_string(), Control::zero(spec.dim)),
            ("+n e1".to_string(), Control::Constant(e1.clone())),
            ("-n e1".to_string(), Control::Constant(e1.iter().map(|v| -v).collect())),
            ("nu*".to_string(), Control::Table(Arc::new(seed.table))),
        ];
        let gamma = if spec.lipschitz_y() > 0.0 { GammaSource::Frozen(seed.policy) } else { GammaSource::Zero };
        // fresh paths, independent of the regression and evaluation bundles
        let dsim = SimOptions { n_paths: cfg.dual.n_paths.unwrap_or(sim.n_paths), seed: sim.seed.wrapping_add(0x9E37_79B9), antithetic: sim.antithetic };
        let grid = TimeGrid::new(p.t, spec.horizon, cfg.grid.steps)?;
        let s = dual_sandwich(&spec, &grid, &p.x, &p.a, n, &trials, seed.u_n, &dsim, &gamma)?;
        rep.verdict("dual.lower", s.lower_ok, format!("min {} = {:.6}", s.min_label, s.min.value));
        rep.verdict("dual.optimizer", s.optimizer_ok.unwrap_or(true), "");
        rep.dual = Some(s);
    }

    if on(Stage::Oracle) && cfg.oracle.kind != OracleKind::None {
        for (i, p) in cfg.points.iter().enumerate() {
            let value = oracle_value(&cfg, &spec, p.t, &p.x)?;
            let u_mc = rep.ladders.iter().find(|l| l.point == i).map(|l| l.report.final_u);
            let tolerance = cfg.oracle.abs_tol.max(cfg.oracle.rel_tol * value.abs());
            let delta = u_mc.map(|u| u.value - value);
            if let Some(d) = delta {
                rep.verdict(format!("oracle[{i}]"), d.abs() <= tolerance, format!("delta {d:.6}, tolerance {tolerance:.6}"));
            }
            rep.oracle.push(OracleEntry { point: i, kind: cfg.oracle.kind, value, u_mc, delta, tolerance: delta.map(|_| tolerance) });
        }
    }

    if rep.verdicts.iter().any(|v| !v.pass) {
        rep.exit_code = EXIT_VERDICT;
    }
    Ok(rep)
}

fn oracle_value(cfg: &ExperimentConfig, spec: &ProblemSpec, t: f64, x: &[f64]) -> Result<f64> {
    match cfg.oracle.kind {
        OracleKind::ColeHopf => {
            if cfg.problem != "kpz" {
                bail!("the Cole-Hopf oracle applies to the kpz problem only");
            }
            let g = |y: &[f64]| (spec.terminal)(y);
            Ok(cole_hopf_kpz(KPZ_LAMBDA, &g, spec.horizon, t, x, 40)?)
        }
        OracleKind::Riccati => {
            if cfg.problem != "lq" {
                bail!("the Riccati oracle applies to the lq problem only");
            }
            let params = LqParams { horizon: spec.horizon, ..default_lq() };
            Ok(riccati_lq(&params, 1000)?.value(t, x))
        }
        OracleKind::Fd => {
            if spec.dim != 1 {
                bail!("the finite-difference oracle is one-dimensional");
            }
            let w = cfg.oracle.fd_half_width;
            let fd = FDGrid1D { t_start: t, a_max: 1.0, ..FDGrid1D::new(x[0] - w, x[0] + w, cfg.oracle.fd_nx, 1) };
            let sat = fd_hjb_1d_saturated(spec, &fd, 1e-4, 6)?;
            if !sat.saturated {
                log::warn!("finite-difference control range did not saturate: {:?}", sat.history);
            }
            Ok(sat.solution.value_at(x[0]))
        }
        OracleKind::None => unreachable!(),
    }
}

/// `report.json` and `summary.csv` in `cfg.out`.
pub fn write_outputs(rep: &Report) -> Result<()> {
    let out = &rep.config.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(rep)?;
    std::fs::write(out.join("report.json"), json + "\n")?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    let kind = match rep.oracle.first() {
        Some(o) => Some(serde_json::to_value(o.kind)?.as_str().unwrap_or("oracle").to_string()),
        None => None,
    };
    let mut header = vec!["point", "t", "x", "a", "n", "u", "stderr", "in_sample_u", "constraint_mass"].into_iter().map(String::from).collect::<Vec<_>>();
    if let Some(k) = &kind {
        header.push(format!("{k}_value"));
        header.push(format!("{k}_delta"));
    }
    w.write_record(&header)?;
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
    for l in &rep.ladders {
        let p = &rep.config.points[l.point];
        let oracle = rep.oracle.iter().find(|o| o.point == l.point);
        for lev in &l.report.levels {
            let mut row = vec![
                l.point.to_string(),
                p.t.to_string(),
                join(&p.x),
                join(&p.a),
                lev.n.to_string(),
                lev.u.value.to_string(),
                lev.u.stderr.to_string(),
                lev.in_sample_u.value.to_string(),
                lev.constraint_mass.value.to_string(),
            ];
            if kind.is_some() {
                let (v, d) = oracle.map(|o| (o.value.to_string(), (lev.u.value - o.value).to_string())).unwrap_or_default();
                row.push(v);
                row.push(d);
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
