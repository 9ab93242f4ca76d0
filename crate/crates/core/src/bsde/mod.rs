//! Backward regression solver for the penalized BSDE and the ladder in `n`.
//!
//! Each step regresses `Y_{k+1}` on a basis of `(X_k, I_k)`. The martingale
//! integrands come from regressing the residual times the increments:
//! `Z_k = E[(Y_{k+1} - Ĉ) ΔW_k | F_k]/dt`, `V_k` likewise with `ΔB_k`; both
//! then serve as control variates in a refit of the continuation `C_k`.
//!
//! The penalty `-n|V|` is applied in its dual form, as a minimum over the
//! ball of radius `n·dt` around `I_k` (see [`policy`]). The reported value is
//! the cost of the resulting feedback control on fresh paths, an upper bound
//! for `Y^n`; the in-sample mean of `Y_0` is kept as a diagnostic.

pub mod basis;
pub mod lsq;
pub mod policy;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use basis::BasisKind;
pub use policy::FeedbackPolicy;

use self::basis::StepBasis;
use self::lsq::Design;
use self::policy::{ball_offsets, StepModel, StepOutcome};
use crate::dual::{dual_estimate, Control, GammaSource};
use crate::forward::{simulate_tilted, simulate_with, PathBundle, SimOptions, TimeGrid};
use crate::problem::ProblemSpec;
use crate::stats::{mean_stderr, norm, quantile, Estimate};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    pub basis: BasisKind,
    /// Ridge relative to `trace(AᵀA)/p`.
    pub ridge: f64,
    pub picard_iters: usize,
    /// Grid points per search direction in the ball (odd).
    pub ball_points: usize,
    /// Searches stay within these empirical quantiles of `I_k` (or reach `I_k`).
    pub clip_quantile: f64,
    /// Paths for the policy evaluation; `None` uses the bundle size.
    pub eval_paths: Option<usize>,
    /// Value the feedback control on fresh paths. When off, the in-sample
    /// mean is reported.
    pub evaluate_policy: bool,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            basis: BasisKind::default(),
            ridge: 1e-8,
            picard_iters: 2,
            ball_points: 41,
            clip_quantile: 5e-4,
            eval_paths: None,
            evaluate_policy: true,
        }
    }
}

impl RegressionConfig {
    pub fn check(&self) -> Result<()> {
        self.basis.check()?;
        if !(self.ridge >= 0.0) || self.picard_iters == 0 || self.ball_points < 3 || !(0.0..0.5).contains(&self.clip_quantile) {
            return Err(Error::InvalidArgument(format!("bad regression config {self:?}")));
        }
        Ok(())
    }
}

/// Seed of the policy-evaluation bundle, derived from the regression seed so
/// that every ladder level sees the same fresh paths.
pub fn eval_seed(seed: u64) -> u64 {
    (seed ^ 0x5DEE_CE66_D1CE_4E5B).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29)
}

/// Output of [`solve_penalized`]. Per-step arrays are step-major:
/// `y[k * n_paths + p]`, `z[(k * n_paths + p) * d + j]`. Flagged paths hold NaN.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub n: f64,
    pub n_paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    /// `C_k(I_k) + f dt - Y_k`, the penalty actually paid on step `k`.
    pub dk: Vec<f64>,
    /// Drift of the ball argmin, `(a*_k - I_k)/dt`; `|ν| <= n`.
    pub nu: Vec<f64>,
    pub u_estimate: Estimate,
    /// Mean of `Y_0` over the regression paths. Biased low by the in-sample
    /// minimization.
    pub in_sample_u: Estimate,
    /// `E Σ_k |V_k| dt`
    pub constraint_mass: Estimate,
    /// Max over paths of the Picard residual, per step and sweep.
    pub picard_residuals: Vec<Vec<f64>>,
    pub ridge_escalations: usize,
    pub active: Vec<bool>,
    pub seed: u64,
    pub policy: Arc<FeedbackPolicy>,
}

impl BackwardSolution {
    pub fn y_at(&self, p: usize, k: usize) -> f64 {
        self.y[k * self.n_paths + p]
    }

    pub fn z_at(&self, p: usize, k: usize) -> &[f64] {
        let o = (k * self.n_paths + p) * self.dim;
        &self.z[o..o + self.dim]
    }

    pub fn v_at(&self, p: usize, k: usize) -> &[f64] {
        let o = (k * self.n_paths + p) * self.dim;
        &self.v[o..o + self.dim]
    }

    pub fn nu_at(&self, p: usize, k: usize) -> &[f64] {
        let o = (k * self.n_paths + p) * self.dim;
        &self.nu[o..o + self.dim]
    }

    pub fn dk_at(&self, p: usize, k: usize) -> f64 {
        self.dk[k * self.n_paths + p]
    }
}

fn column_stats(rows: &[usize], get: impl Fn(usize) -> f64 + Sync) -> (f64, f64) {
    let v: Vec<f64> = rows.par_iter().map(|&p| get(p)).collect();
    let e = mean_stderr(&v);
    let sd = e.stderr * (v.len() as f64).sqrt();
    (e.value, if sd.is_finite() { sd } else { 0.0 })
}

/// Solves the penalized BSDE at level `n` on `bundle`.
pub fn solve_penalized(spec: &ProblemSpec, bundle: &PathBundle, n: f64, reg: &RegressionConfig) -> Result<BackwardSolution> {
    reg.check()?;
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument(format!("penalization level must be positive, got {n}")));
    }
    if bundle.dim != spec.dim {
        return Err(Error::Structural(format!("bundle has dimension {}, problem {}", bundle.dim, spec.dim)));
    }
    let dt = bundle.grid.dt();
    if dt * spec.lipschitz_y() >= 1.0 && reg.picard_iters <= 1 {
        return Err(Error::InvalidArgument(format!("dt * L_F = {} >= 1; use more steps or picard_iters > 1", dt * spec.lipschitz_y())));
    }
    let d = spec.dim;
    let np = bundle.n_paths;
    let steps = bundle.steps();
    let active = bundle.active();
    let rows: Vec<usize> = (0..np).filter(|&p| active[p]).collect();
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("need at least two usable paths".into()));
    }

    let mut y = vec![f64::NAN; (steps + 1) * np];
    let mut z = vec![f64::NAN; steps * np * d];
    let mut v = vec![f64::NAN; steps * np * d];
    let mut dk = vec![f64::NAN; steps * np];
    let mut nu = vec![f64::NAN; steps * np * d];
    let mut residuals = vec![Vec::new(); steps];
    let mut escalations = 0;
    let mut policy = FeedbackPolicy::new(spec, dt, n, reg.ball_points, reg.picard_iters, steps);

    let terminal: Vec<f64> = rows.par_iter().map(|&p| (spec.terminal)(bundle.x_at(p, steps))).collect();
    for (&p, g) in rows.iter().zip(&terminal) {
        y[steps * np + p] = *g;
    }

    let idx: Vec<usize> = (0..rows.len()).collect();
    for k in (0..steps).rev() {
        let next: Vec<f64> = rows.iter().map(|&p| y[(k + 1) * np + p]).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite Y at step {}", k + 1)));
        }
        // regressors are (X_k, Ĩ_k): on a tilted bundle the control in force
        // differs from I_k, but the one-step law given (X_k, Ĩ_k) does not
        let mut ieff = vec![0.0; rows.len() * d];
        ieff.par_chunks_mut(d).zip(rows.par_iter()).for_each(|(out, &p)| bundle.effective_i(p, k, out));
        let (xm, xs): (Vec<f64>, Vec<f64>) = (0..d).map(|j| column_stats(&rows, |p| bundle.x_at(p, k)[j])).unzip();
        let (im, is): (Vec<f64>, Vec<f64>) = (0..d).map(|j| column_stats(&idx, |r| ieff[r * d + j])).unzip();
        let basis = StepBasis::fit(&reg.basis, d, &xm, &xs, &im, &is);

        let pcols = basis.len();
        let mut a = vec![0.0; rows.len() * pcols];
        a.par_chunks_mut(pcols)
            .zip(rows.par_iter().zip(ieff.par_chunks(d)))
            .for_each(|(row, (&p, i))| basis.features(bundle.x_at(p, k), i, row));
        let design = Design { rows: rows.len(), cols: pcols, a };

        let solver = lsq::Solver::new(&design, reg.ridge, k)?;
        escalations += solver.escalated as usize;
        let c1 = solver.solve(&design, &next);
        let resid: Vec<f64> = (0..rows.len()).into_par_iter().map(|r| next[r] - design.predict(r, &c1)).collect();
        // zv[r * 2d + j]: Z then V
        let mut zv = vec![0.0; rows.len() * 2 * d];
        for (t, inc) in [&bundle.dw, &bundle.db].into_iter().enumerate() {
            for j in 0..d {
                let target: Vec<f64> = rows.iter().zip(&resid).map(|(&p, e)| e * inc[(p * steps + k) * d + j]).collect();
                let c = solver.solve(&design, &target);
                zv.par_chunks_mut(2 * d).enumerate().for_each(|(r, out)| out[t * d + j] = design.predict(r, &c) / dt);
            }
        }
        let cv: Vec<f64> = rows
            .par_iter()
            .enumerate()
            .map(|(r, &p)| {
                let mut t = next[r];
                let (dw, db) = (bundle.dw_at(p, k), bundle.db_at(p, k));
                for j in 0..d {
                    t -= zv[r * 2 * d + j] * dw[j] + zv[r * 2 * d + d + j] * db[j];
                }
                t
            })
            .collect();
        let coef = solver.solve(&design, &cv);
        for (r, &p) in rows.iter().enumerate() {
            let o = (k * np + p) * d;
            z[o..o + d].copy_from_slice(&zv[r * 2 * d..r * 2 * d + d]);
            v[o..o + d].copy_from_slice(&zv[r * 2 * d + d..(r + 1) * 2 * d]);
        }

        let model = if k == 0 && basis.a_degenerate() {
            start_model(&policy, bundle, &rows, &next, reg)
        } else {
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..d)
                .map(|j| {
                    let col: Vec<f64> = (0..rows.len()).map(|r| ieff[r * d + j]).collect();
                    (quantile(&col, reg.clip_quantile), quantile(&col, 1.0 - reg.clip_quantile))
                })
                .unzip();
            StepModel::Regressed { basis, coef, lo, hi }
        };
        let model = Arc::new(model);
        let outcomes: Vec<StepOutcome> = rows.par_iter().map(|&p| policy.step_with(&model, bundle.x_at(p, k), bundle.i_at(p, k))).collect();
        policy.models[k] = Some(model);

        let sweeps = outcomes.iter().map(|o| o.residuals.len()).max().unwrap_or(0);
        residuals[k] = (0..sweeps).map(|s| outcomes.iter().map(|o| o.residuals.get(s).copied().unwrap_or(0.0)).fold(0.0, f64::max)).collect();
        for (o, &p) in outcomes.iter().zip(&rows) {
            if !o.y.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite Y at step {k}, path {p}")));
            }
            y[k * np + p] = o.y;
            dk[k * np + p] = o.dk;
            let i = bundle.i_at(p, k);
            let off = (k * np + p) * d;
            for j in 0..d {
                nu[off + j] = (o.a[j] - i[j]) / dt;
            }
        }
    }

    let y0: Vec<f64> = rows.iter().map(|&p| y[p]).collect();
    let in_sample_u = if policy.models[0].as_deref().is_some_and(|m| matches!(m, StepModel::Start { .. })) {
        // every path carries the same Y_0; the spread comes from step 1
        let e = start_spread(&policy, bundle, &rows);
        Estimate { value: y0[0], stderr: e }
    } else {
        mean_stderr(&y0)
    };
    let masses: Vec<f64> = rows
        .iter()
        .map(|&p| (0..steps).map(|k| norm(&v[(k * np + p) * d..(k * np + p + 1) * d])).sum::<f64>() * dt)
        .collect();
    let constraint_mass = mean_stderr(&masses);
    let policy = Arc::new(policy);

    let u_estimate = if reg.evaluate_policy {
        let sim = SimOptions { n_paths: reg.eval_paths.unwrap_or(np), seed: eval_seed(bundle.seed), antithetic: bundle.antithetic };
        let gamma = if spec.lipschitz_y() > 0.0 { GammaSource::Frozen(policy.clone()) } else { GammaSource::Zero };
        dual_estimate(spec, &bundle.grid, &bundle.x0, &bundle.a0, &Control::Feedback(policy.clone()), n, &sim, &gamma)?.estimate
    } else {
        in_sample_u
    };

    Ok(BackwardSolution {
        n,
        n_paths: np,
        steps,
        dim: d,
        y,
        z,
        v,
        dk,
        nu,
        u_estimate,
        in_sample_u,
        constraint_mass,
        picard_residuals: residuals,
        ridge_escalations: escalations,
        active,
        seed: bundle.seed,
        policy,
    })
}

/// Candidate moves at the start step: the ball grid along each coordinate axis.
fn start_moves(d: usize, radius: f64, points: usize) -> Vec<Vec<f64>> {
    let offs = ball_offsets(radius, points);
    let mut moves = vec![vec![0.0; d]];
    for j in 0..d {
        for o in &offs[1..] {
            let mut s = vec![0.0; d];
            s[j] = *o;
            moves.push(s);
        }
    }
    moves
}

/// Tabulates the start-step continuation over candidate moves `s`:
///
/// ```text
/// C_0(s) = E[Y_1(X_1 + δ, I_1 + s)],   δ = ϱ(x0) s dt
///        ≈ E[Y_1] + G_x·δ + ½ δᵀ diag(H_x) δ + G_i·s
/// ```
///
/// with the path averages `G`, `H` of central differences of the fitted
/// `Y_1`. Moving `X_0` is exact because every path starts at `x0`; the
/// expansion is needed because `I_1` is spread over only `sqrt(dt)`, far less
/// than the ball, so the step-1 fit cannot be evaluated at `I_1 + s` directly.
fn start_model(policy: &FeedbackPolicy, bundle: &PathBundle, rows: &[usize], next: &[f64], reg: &RegressionConfig) -> StepModel {
    let d = bundle.dim;
    let dt = policy.dt;
    let rho = (policy.spec.rho)(&bundle.x0);
    let rho_max = rho.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let moves = start_moves(d, policy.n * dt, reg.ball_points);
    let hx = 1e-3 + 0.5 * policy.n * dt * dt * rho_max;
    let hi = 1e-3 * dt.sqrt();
    let base = mean_stderr(next).value;
    // a tilted bundle already moved every path by the same s_g at step 0
    let s_g = start_tilt(bundle, rows, dt);
    // mean of Y_1 with coordinate `j` of x (or i) moved by `h`
    let shifted = |on_x: bool, j: usize, h: f64| -> f64 {
        let vals: Vec<f64> = rows
            .par_iter()
            .map(|&p| {
                let mut x1 = bundle.x_at(p, 1).to_vec();
                let mut i1 = bundle.i_at(p, 1).to_vec();
                if on_x {
                    x1[j] += h;
                } else {
                    i1[j] += h;
                }
                policy.value(1, &x1, &i1)
            })
            .collect();
        mean_stderr(&vals).value
    };
    let mut gx = vec![0.0; d];
    let mut hxx = vec![0.0; d];
    let mut gi = vec![0.0; d];
    for j in 0..d {
        let (up, dn) = (shifted(true, j, hx), shifted(true, j, -hx));
        gx[j] = (up - dn) / (2.0 * hx);
        hxx[j] = (up - 2.0 * base + dn) / (hx * hx);
        gi[j] = (shifted(false, j, hi) - shifted(false, j, -hi)) / (2.0 * hi);
    }
    let values = moves
        .iter()
        .map(|s| {
            let mut c = base;
            for r in 0..d {
                let delta = (0..d).map(|l| rho[r * d + l] * (s[l] - s_g[l])).sum::<f64>() * dt;
                c += gx[r] * delta + 0.5 * hxx[r] * delta * delta + gi[r] * (s[r] - s_g[r]);
            }
            c
        })
        .collect();
    StepModel::Start { a0: bundle.a0.clone(), moves, values }
}

/// Mean move `ν_0 dt` already applied at step 0; zero when untilted.
fn start_tilt(bundle: &PathBundle, rows: &[usize], dt: f64) -> Vec<f64> {
    let mut s = vec![0.0; bundle.dim];
    if bundle.tilt.is_some() {
        for &p in rows {
            for (o, v) in s.iter_mut().zip(bundle.tilt_at(p, 0).unwrap()) {
                *o += v * dt / rows.len() as f64;
            }
        }
    }
    s
}

/// Standard error of the start-step value: dispersion of `Y_1` along the chosen move.
fn start_spread(policy: &FeedbackPolicy, bundle: &PathBundle, rows: &[usize]) -> f64 {
    let d = bundle.dim;
    let dt = policy.dt;
    let o = policy.step(0, &bundle.x0, &bundle.a0);
    let rho = (policy.spec.rho)(&bundle.x0);
    let s_g = start_tilt(bundle, rows, dt);
    let shift: Vec<f64> = (0..d).map(|r| (0..d).map(|l| rho[r * d + l] * (o.a[l] - bundle.a0[l] - s_g[l])).sum::<f64>() * dt).collect();
    let vals: Vec<f64> = rows
        .par_iter()
        .map(|&p| {
            let x1: Vec<f64> = bundle.x_at(p, 1).iter().zip(&shift).map(|(a, b)| a + b).collect();
            policy.value(1, &x1, bundle.i_at(p, 1))
        })
        .collect();
    mean_stderr(&vals).stderr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    pub schedule: Vec<f64>,
    pub tol_u: f64,
    /// Stop once `|Δu| <= tol_u` and the constraint mass is below this.
    pub tol_k: Option<f64>,
    /// Train each level after the first on paths shifted by the previous
    /// level's mean control (same noise), so the fit covers where the policy goes.
    pub guided: bool,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self { schedule: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0], tol_u: 0.01, tol_k: None, guided: true }
    }
}

impl LadderConfig {
    pub fn check(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidArgument("empty penalization schedule".into()));
        }
        if self.schedule.windows(2).any(|w| !(w[0] < w[1])) || !(self.schedule[0] > 0.0) {
            return Err(Error::InvalidArgument("schedule must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderLevel {
    pub n: f64,
    pub u: Estimate,
    pub in_sample_u: Estimate,
    pub constraint_mass: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub schedule: Vec<f64>,
    pub levels: Vec<LadderLevel>,
    /// `u_{j+1} <= u_j + 2 σ` for every consecutive pair.
    pub monotone: bool,
    /// Pairs `(n_j, n_{j+1})` breaking the band.
    pub violations: Vec<(f64, f64)>,
    /// Constraint mass nonincreasing within `2 σ`.
    pub mass_monotone: bool,
    pub converged: bool,
    pub stopped_early: bool,
    pub final_u: Estimate,
    pub note: String,
}

impl LadderReport {
    fn build(schedule: &[f64], levels: Vec<LadderLevel>, tol_u: f64, stopped_early: bool) -> Self {
        let band = |a: &Estimate, b: &Estimate| 2.0 * a.combined(b);
        let mut violations = Vec::new();
        let mut mass_monotone = true;
        for w in levels.windows(2) {
            if w[1].u.value > w[0].u.value + band(&w[0].u, &w[1].u) {
                violations.push((w[0].n, w[1].n));
            }
            if w[1].constraint_mass.value > w[0].constraint_mass.value + band(&w[0].constraint_mass, &w[1].constraint_mass) {
                mass_monotone = false;
            }
        }
        let converged = match levels.as_slice() {
            [.., a, b] => (b.u.value - a.u.value).abs() <= tol_u,
            _ => tol_u.is_infinite(),
        };
        let final_u = levels.last().map(|l| l.u).unwrap_or(Estimate { value: f64::NAN, stderr: f64::NAN });
        Self {
            schedule: schedule.to_vec(),
            monotone: violations.is_empty(),
            violations,
            mass_monotone,
            converged,
            stopped_early,
            final_u,
            levels,
            note: "no convergence rate in n is known; the stopping rule is a heuristic".into(),
        }
    }

    pub fn level(&self, n: f64) -> Option<&LadderLevel> {
        self.levels.iter().find(|l| l.n == n)
    }
}

/// Runs the schedule on one bundle (common random numbers across levels).
/// `on_level` sees each solution, with the bundle it was fitted on, before
/// both are dropped.
pub fn run_ladder_on(
    spec: &ProblemSpec,
    bundle: &PathBundle,
    ladder: &LadderConfig,
    reg: &RegressionConfig,
    mut on_level: impl FnMut(&BackwardSolution, &PathBundle),
) -> Result<LadderReport> {
    ladder.check()?;
    let mut levels: Vec<LadderLevel> = Vec::new();
    let mut stopped_early = false;
    let mut guided: Option<PathBundle> = None;
    for &n in &ladder.schedule {
        let train = guided.as_ref().unwrap_or(bundle);
        let sol = solve_penalized(spec, train, n, reg)?;
        log::info!("n = {n}: u = {:.6} ± {:.6}, mass = {:.6}", sol.u_estimate.value, sol.u_estimate.stderr, sol.constraint_mass.value);
        on_level(&sol, train);
        levels.push(LadderLevel { n, u: sol.u_estimate, in_sample_u: sol.in_sample_u, constraint_mass: sol.constraint_mass });
        if let (Some(tk), [.., a, b]) = (ladder.tol_k, levels.as_slice()) {
            if (b.u.value - a.u.value).abs() <= ladder.tol_u && b.constraint_mass.value < tk && n != *ladder.schedule.last().unwrap() {
                stopped_early = true;
                break;
            }
        }
        if ladder.guided && n != *ladder.schedule.last().unwrap() {
            guided = Some(guide(spec, bundle, &sol)?);
        }
    }
    Ok(LadderReport::build(&ladder.schedule, levels, ladder.tol_u, stopped_early))
}

/// Re-simulates `bundle` (same noise) with `I` shifted by the mean drift of
/// `sol`'s feedback, estimated on a pilot run. A state-dependent guide would
/// collapse `Ĩ_k` onto a function of `X_k` and leave nothing to regress on.
fn guide(spec: &ProblemSpec, bundle: &PathBundle, sol: &BackwardSolution) -> Result<PathBundle> {
    let d = bundle.dim;
    let steps = bundle.steps();
    let pilot_opts = SimOptions { n_paths: bundle.n_paths.min(PILOT_PATHS), seed: eval_seed(eval_seed(bundle.seed)), antithetic: bundle.antithetic };
    let ctl = Control::Feedback(sol.policy.clone());
    let pilot = simulate_tilted(spec, &bundle.grid, &bundle.x0, &bundle.a0, &pilot_opts, &ctl, sol.n)?;
    let mask = pilot.active();
    let active: Vec<usize> = (0..pilot.n_paths).filter(|&p| mask[p]).collect();
    let mut mean = vec![0.0; steps * d];
    for k in 0..steps {
        for &p in &active {
            for (m, v) in mean[k * d..(k + 1) * d].iter_mut().zip(pilot.tilt_at(p, k).unwrap()) {
                *m += v / active.len() as f64;
            }
        }
    }
    let shift = move |k: usize, _: f64, _: &[f64], _: &[f64], out: &mut [f64]| out.copy_from_slice(&mean[k * d..(k + 1) * d]);
    let opts = SimOptions { n_paths: bundle.n_paths, seed: bundle.seed, antithetic: bundle.antithetic };
    simulate_tilted(spec, &bundle.grid, &bundle.x0, &bundle.a0, &opts, &shift, sol.n * (1.0 + 1e-9))
}

const PILOT_PATHS: usize = 20_000;

/// Simulates one bundle and runs the ladder on it.
pub fn run_ladder(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    a: &[f64],
    sim: &SimOptions,
    ladder: &LadderConfig,
    reg: &RegressionConfig,
) -> Result<LadderReport> {
    let bundle = simulate_with(spec, grid, x, a, sim)?;
    run_ladder_on(spec, &bundle, ladder, reg, |_, _| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AIndependenceReport {
    pub anchors: Vec<Vec<f64>>,
    pub values: Vec<Estimate>,
    pub max_discrepancy: f64,
    /// Combined standard error of the pair attaining the maximum.
    pub combined_stderr: f64,
    /// Every pair within 3 combined standard errors.
    pub within_ci: bool,
    pub reports: Vec<LadderReport>,
}

/// Full ladder from each anchor `a`, then pairwise comparison of the final values.
#[allow(clippy::too_many_arguments)]
pub fn check_a_independence(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    a_list: &[Vec<f64>],
    n_paths: usize,
    seeds: &[u64],
    ladder: &LadderConfig,
    reg: &RegressionConfig,
) -> Result<AIndependenceReport> {
    if a_list.len() < 2 {
        return Err(Error::InvalidArgument("need at least two anchor points".into()));
    }
    if seeds.len() != a_list.len() {
        return Err(Error::InvalidArgument("one seed per anchor point required".into()));
    }
    let mut reports = Vec::new();
    for (a, &seed) in a_list.iter().zip(seeds) {
        reports.push(run_ladder(spec, grid, x, a, &SimOptions::new(n_paths, seed), ladder, reg)?);
    }
    let values: Vec<Estimate> = reports.iter().map(|r| r.final_u).collect();
    let (mut max_discrepancy, mut combined_stderr, mut within_ci) = (0.0, 0.0, true);
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            let diff = (values[i].value - values[j].value).abs();
            let se = values[i].combined(&values[j]);
            within_ci &= diff <= 3.0 * se;
            if diff >= max_discrepancy {
                max_discrepancy = diff;
                combined_stderr = se;
            }
        }
    }
    Ok(AIndependenceReport { anchors: a_list.to_vec(), values, max_discrepancy, combined_stderr, within_ci, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCheck {
    pub x_exponent: f64,
    pub a_exponent: f64,
    /// `(n, C_fit(n))`
    pub fitted: Vec<(f64, f64)>,
    /// `max C_fit / min C_fit` across levels.
    pub ratio: f64,
    pub stable: bool,
}

/// Fits `C(n) = max |u_n(x, a)| / (1 + |x|^px + |a|^pa)` over a batch of
/// anchors and reports whether it stays within a factor 2 across levels.
pub fn check_growth_bound(batch: &[(Vec<f64>, Vec<f64>, &LadderReport)], spec: &ProblemSpec) -> Result<GrowthCheck> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty growth batch".into()));
    }
    let (px, pa) = (spec.growth.x_exponent(), spec.growth.a_exponent());
    let mut ns: Vec<f64> = batch.iter().flat_map(|(_, _, r)| r.levels.iter().map(|l| l.n)).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    let fitted: Vec<(f64, f64)> = ns
        .iter()
        .map(|&n| {
            let c = batch
                .iter()
                .filter_map(|(x, a, r)| r.level(n).map(|l| l.u.value.abs() / (1.0 + norm(x).powf(px) + norm(a).powf(pa))))
                .fold(0.0, f64::max);
            (n, c)
        })
        .collect();
    let mx = fitted.iter().map(|f| f.1).fold(0.0, f64::max);
    let mn = fitted.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
    let ratio = if mn > 0.0 { mx / mn } else if mx == 0.0 { 1.0 } else { f64::INFINITY };
    Ok(GrowthCheck { x_exponent: px, a_exponent: pa, fitted, ratio, stable: ratio <= 2.0 })
}
