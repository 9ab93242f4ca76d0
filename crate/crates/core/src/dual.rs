//! Dual representation of the penalized solution:
//!
//! ```text
//! Y^n_t = ess inf_{|ν| <= n} E^ν[ ∫ e^{∫γ} f(X, I, 0) dr + e^{∫γ} g(X_T) ]
//! ```
//!
//! Every bounded tilt gives an upper bound on `Y^n`; the minimizing tilt
//! opposes `V^n`. Estimates run on fresh paths under the tilted dynamics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{BackwardSolution, FeedbackPolicy};
use crate::forward::{check_blowup, run_path, PathBundle, PathVisitor, SimOptions, StepView, Tilt, TiltControl, TimeGrid};
use crate::problem::ProblemSpec;
use crate::stats::{mean_stderr, norm, quantile, Estimate};
use crate::{Error, Result};

/// Per-path, per-step discount rates. Step-major like [`BackwardSolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPath {
    pub n_paths: usize,
    pub steps: usize,
    pub gamma: Vec<f64>,
    /// `exp(Σ_{j<k} γ_j dt)` at nodes `0..=steps`.
    pub discount: Vec<f64>,
    pub clamp_count: usize,
    pub clamp_rate: f64,
}

impl GammaPath {
    pub fn gamma_at(&self, p: usize, k: usize) -> f64 {
        self.gamma[k * self.n_paths + p]
    }

    pub fn discount_at(&self, p: usize, k: usize) -> f64 {
        self.discount[k * self.n_paths + p]
    }

    pub fn max_abs(&self) -> f64 {
        self.gamma.iter().filter(|v| v.is_finite()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `γ = (f(X, I, Y) - f(X, I, 0))/Y` where `|Y| > 1e-8 (1 + |u|)`, else 0,
/// clamped to `[-L_F, L_F]`.
#[inline]
fn gamma_value(spec: &ProblemSpec, x: &[f64], a: &[f64], y: f64, eps: f64) -> (f64, bool) {
    if y.abs() <= eps {
        return (0.0, false);
    }
    let l = spec.lipschitz_y();
    let g = (spec.f(x, a, y) - spec.f(x, a, 0.0)) / y;
    if g.abs() > l {
        (g.clamp(-l, l), true)
    } else {
        (g, false)
    }
}

pub fn gamma_process(spec: &ProblemSpec, bundle: &PathBundle, sol: &BackwardSolution) -> Result<GammaPath> {
    if sol.n_paths != bundle.n_paths || sol.steps != bundle.steps() {
        return Err(Error::InvalidArgument("solution was not computed on this bundle".into()));
    }
    let (np, steps) = (bundle.n_paths, bundle.steps());
    let dt = bundle.grid.dt();
    let eps = 1e-8 * (1.0 + sol.u_estimate.value.abs());
    let per_path: Vec<(Vec<f64>, usize)> = (0..np)
        .into_par_iter()
        .map(|p| {
            if !sol.active[p] {
                return (vec![f64::NAN; steps], 0);
            }
            let mut clamps = 0;
            let g = (0..steps)
                .map(|k| {
                    let (g, c) = gamma_value(spec, bundle.x_at(p, k), bundle.i_at(p, k), sol.y_at(p, k), eps);
                    clamps += c as usize;
                    g
                })
                .collect();
            (g, clamps)
        })
        .collect();
    let mut gamma = vec![0.0; steps * np];
    let mut discount = vec![1.0; (steps + 1) * np];
    let mut clamp_count = 0;
    for (p, (g, c)) in per_path.iter().enumerate() {
        clamp_count += c;
        for k in 0..steps {
            gamma[k * np + p] = g[k];
            discount[(k + 1) * np + p] = discount[k * np + p] * (g[k] * dt).exp();
        }
    }
    let clamp_rate = clamp_count as f64 / (np * steps) as f64;
    if clamp_rate > 0.01 {
        log::warn!("gamma clamped on {:.2}% of entries; check epsilon_y or the generator", 100.0 * clamp_rate);
    }
    Ok(GammaPath { n_paths: np, steps, gamma, discount, clamp_count, clamp_rate })
}

/// Which discount to use along fresh paths.
#[derive(Debug, Clone)]
pub enum GammaSource {
    /// `γ ≡ 0`, exact for generators independent of `y`.
    Zero,
    /// `γ` frozen at the fitted `Y` of a solved level.
    Frozen(Arc<FeedbackPolicy>),
}

/// Tilt families for the dual estimates.
#[derive(Debug, Clone)]
pub enum Control {
    Constant(Vec<f64>),
    Table(Arc<NuTable>),
    Feedback(Arc<FeedbackPolicy>),
}

impl Control {
    pub fn zero(d: usize) -> Self {
        Control::Constant(vec![0.0; d])
    }

    pub fn describe(&self) -> String {
        match self {
            Control::Constant(v) => format!("constant {v:?}"),
            Control::Table(t) => format!("nu* table ({} steps, {} bins/axis, rule {:?})", t.steps, t.bins, t.rule),
            Control::Feedback(p) => format!("argmin feedback at n = {}", p.n),
        }
    }

    /// True for the controls built from a solved level.
    pub fn is_optimizer(&self) -> bool {
        !matches!(self, Control::Constant(_))
    }
}

impl TiltControl for Control {
    fn drift(&self, k: usize, t: f64, x: &[f64], i: &[f64], out: &mut [f64]) {
        match self {
            Control::Constant(v) => out.copy_from_slice(v),
            Control::Table(tab) => tab.eval(k, x, i, out),
            Control::Feedback(p) => p.drift(k, t, x, i, out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureMode {
    /// Simulate under `P^ν` by adding `ν` to the `I` dynamics.
    #[default]
    Drift,
    /// Simulate under `P` and weight by the Girsanov density. The control acts
    /// on `I_k` directly (no start-of-step shift), so the two modes agree to
    /// `O(dt)`.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedValueEstimate {
    pub nu: String,
    pub n_bound: f64,
    pub estimate: Estimate,
    pub n_paths: usize,
    pub seed: u64,
    pub mode: MeasureMode,
}

/// Running discounted cost along one path.
struct CostAcc<'a> {
    spec: &'a ProblemSpec,
    gamma: &'a GammaSource,
    dt: f64,
    eps: f64,
    disc: f64,
    cost: f64,
    last_x: Vec<f64>,
    /// Weighted mode: control and accumulated log-density.
    weigh: Option<(&'a dyn TiltControl, f64)>,
    log_w: f64,
    nu: Vec<f64>,
    violation: Option<(usize, f64)>,
}

impl CostAcc<'_> {
    fn new<'a>(spec: &'a ProblemSpec, gamma: &'a GammaSource, dt: f64, eps: f64, weigh: Option<(&'a dyn TiltControl, f64)>) -> CostAcc<'a> {
        CostAcc { spec, gamma, dt, eps, disc: 1.0, cost: 0.0, last_x: Vec::new(), weigh, log_w: 0.0, nu: vec![0.0; spec.dim], violation: None }
    }

    /// One step of the accumulated functional; shared with [`pathwise_cost`]
    /// so both give identical floating-point results.
    #[inline]
    fn add(&mut self, k: usize, x: &[f64], i: &[f64], y_hint: impl FnOnce() -> f64) {
        self.cost += self.disc * self.spec.f(x, i, 0.0) * self.dt;
        if let GammaSource::Frozen(_) = self.gamma {
            let (g, _) = gamma_value(self.spec, x, i, y_hint(), self.eps);
            self.disc *= (g * self.dt).exp();
        }
        let _ = k;
    }

    fn finish(&self) -> f64 {
        let total = self.cost + self.disc * (self.spec.terminal)(&self.last_x);
        if self.weigh.is_some() {
            self.log_w.exp() * total
        } else {
            total
        }
    }
}

impl PathVisitor for CostAcc<'_> {
    fn step(&mut self, s: &StepView<'_>) {
        let (x, i) = (s.x, s.i_eff);
        let gamma = self.gamma;
        let hint = || match gamma {
            GammaSource::Frozen(p) => p.value_hint(s.k, s.x, s.i),
            GammaSource::Zero => 0.0,
        };
        self.add(s.k, x, i, hint);
        if let Some((ctl, bound)) = self.weigh {
            ctl.drift(s.k, 0.0, s.x, s.i, &mut self.nu);
            let nn = norm(&self.nu);
            if !(nn <= bound * (1.0 + 1e-12)) && self.violation.is_none() {
                self.violation = Some((s.k, nn));
            }
            self.log_w += self.nu.iter().zip(s.db).map(|(v, b)| v * b).sum::<f64>() - 0.5 * nn * nn * self.dt;
        }
        self.last_x.clear();
        self.last_x.extend_from_slice(s.x_next);
    }
}

fn eps_for(gamma: &GammaSource, spec: &ProblemSpec, x: &[f64], a: &[f64]) -> f64 {
    match gamma {
        GammaSource::Zero => 0.0,
        GammaSource::Frozen(p) => 1e-8 * (1.0 + p.value_hint(0, x, a).abs()),
    }
    .max(if spec.lipschitz_y() == 0.0 { 0.0 } else { f64::MIN_POSITIVE })
}

/// `E^ν[∫ e^{∫γ} f(X, Ĩ, 0) dr + e^{∫γ} g(X_T)]` by drift injection.
#[allow(clippy::too_many_arguments)]
pub fn dual_estimate(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    a: &[f64],
    nu: &Control,
    n_bound: f64,
    sim: &SimOptions,
    gamma: &GammaSource,
) -> Result<TiltedValueEstimate> {
    estimate_impl(spec, grid, x, a, nu, n_bound, sim, gamma, MeasureMode::Drift)
}

/// As [`dual_estimate`] with an explicit measure-change mode.
#[allow(clippy::too_many_arguments)]
pub fn estimate_impl(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    a: &[f64],
    nu: &Control,
    n_bound: f64,
    sim: &SimOptions,
    gamma: &GammaSource,
    mode: MeasureMode,
) -> Result<TiltedValueEstimate> {
    if !(n_bound >= 0.0) {
        return Err(Error::InvalidArgument(format!("tilt bound must be nonnegative, got {n_bound}")));
    }
    if x.len() != spec.dim || a.len() != spec.dim || sim.n_paths == 0 {
        return Err(Error::InvalidArgument("bad start state or path count".into()));
    }
    spec.check_structure()?;
    let dt = grid.dt();
    let eps = eps_for(gamma, spec, x, a);
    let tilt = Tilt { control: nu, bound: n_bound };
    let results: Vec<Result<Option<f64>>> = (0..sim.n_paths)
        .into_par_iter()
        .map(|p| {
            let weigh = (mode == MeasureMode::Weighted).then_some((nu as &dyn TiltControl, n_bound));
            let mut acc = CostAcc::new(spec, gamma, dt, eps, weigh);
            let t = (mode == MeasureMode::Drift).then_some(&tilt);
            let blown = run_path(spec, grid, x, a, p, sim, t, &mut acc)?;
            if let Some((step, norm)) = acc.violation {
                return Err(Error::TiltBound { step, path: p, norm, bound: n_bound });
            }
            Ok((!blown).then(|| acc.finish()))
        })
        .collect();
    let mut vals = Vec::with_capacity(sim.n_paths);
    for r in results {
        if let Some(v) = r? {
            vals.push(v);
        }
    }
    check_blowup(sim.n_paths - vals.len(), sim.n_paths)?;
    Ok(TiltedValueEstimate { nu: nu.describe(), n_bound, estimate: mean_stderr(&vals), n_paths: sim.n_paths, seed: sim.seed, mode })
}

/// The dual functional along each path of an existing bundle, using the
/// bundle's own tilt for the control in force. Matches [`dual_estimate`]
/// bit for bit when replayed on the same seed.
pub fn pathwise_cost(spec: &ProblemSpec, bundle: &PathBundle, gamma: &GammaSource) -> Vec<f64> {
    let dt = bundle.grid.dt();
    let eps = eps_for(gamma, spec, &bundle.x0, &bundle.a0);
    let active = bundle.active();
    (0..bundle.n_paths)
        .into_par_iter()
        .filter(|&p| active[p])
        .map(|p| {
            let mut acc = CostAcc::new(spec, gamma, dt, eps, None);
            let mut ie = vec![0.0; bundle.dim];
            for k in 0..bundle.steps() {
                bundle.effective_i(p, k, &mut ie);
                let hint = || match gamma {
                    GammaSource::Frozen(pol) => pol.value_hint(k, bundle.x_at(p, k), bundle.i_at(p, k)),
                    GammaSource::Zero => 0.0,
                };
                acc.add(k, bundle.x_at(p, k), &ie, hint);
            }
            acc.last_x = bundle.x_at(p, bundle.steps()).to_vec();
            acc.finish()
        })
        .collect()
}

/// How [`nu_star`] turns a solution into a drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuRule {
    /// Average of the ball-argmin drift `(a*_k - I_k)/dt`.
    #[default]
    Argmin,
    /// Average of `-n V/|V|` (zero where `|V| < 1e-12`).
    SignOfV,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuStarConfig {
    /// Bins per axis; axes are the `d` coordinates of `X` then of `I`.
    pub bins: usize,
    /// Bin range per axis is between these empirical quantiles.
    pub tail: f64,
    pub rule: NuRule,
}

impl Default for NuStarConfig {
    fn default() -> Self {
        Self { bins: 12, tail: 0.005, rule: NuRule::Argmin }
    }
}

/// Binned feedback `ν*(k, x, i)`, multilinear between cell centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuTable {
    pub steps: usize,
    pub dim: usize,
    pub dt: f64,
    pub n_bound: f64,
    pub bins: usize,
    pub rule: NuRule,
    /// Bin range per step and axis.
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
    /// Per step: `values[cell * dim + j]`.
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u32>>,
    pub empty_cells: usize,
}

impl NuTable {
    fn degenerate(lo: f64, hi: f64) -> bool {
        !(hi - lo > 1e-12 * (1.0 + lo.abs()))
    }

    fn axis_bins(&self, lo: f64, hi: f64) -> usize {
        if Self::degenerate(lo, hi) {
            1
        } else {
            self.bins
        }
    }

    fn cell_of(&self, k: usize, coords: &[f64]) -> usize {
        let mut idx = 0;
        for (ax, v) in coords.iter().enumerate() {
            let (lo, hi) = (self.lo[k][ax], self.hi[k][ax]);
            let nb = self.axis_bins(lo, hi);
            let b = if nb == 1 { 0 } else { (((v - lo) / (hi - lo) * nb as f64).floor().max(0.0) as usize).min(nb - 1) };
            idx = idx * nb + b;
        }
        idx
    }

    pub fn eval(&self, k: usize, x: &[f64], i: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let coords: Vec<f64> = x.iter().chain(i).copied().collect();
        // per axis: (low index, weight of the upper neighbour, bins)
        let axes: Vec<(usize, f64, usize)> = coords
            .iter()
            .enumerate()
            .map(|(ax, v)| {
                let (lo, hi) = (self.lo[k][ax], self.hi[k][ax]);
                let nb = self.axis_bins(lo, hi);
                if nb == 1 {
                    return (0, 0.0, 1);
                }
                let u = ((v - lo) / (hi - lo) * nb as f64 - 0.5).clamp(0.0, (nb - 1) as f64);
                let i0 = (u.floor() as usize).min(nb - 2);
                (i0, u - i0 as f64, nb)
            })
            .collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        let live: Vec<usize> = (0..axes.len()).filter(|&a| axes[a].2 > 1).collect();
        for corner in 0..(1usize << live.len()) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut bit = 0;
            for &(i0, t, nb) in &axes {
                let b = if nb > 1 {
                    let up = (corner >> bit) & 1 == 1;
                    bit += 1;
                    w *= if up { t } else { 1.0 - t };
                    i0 + up as usize
                } else {
                    0
                };
                idx = idx * nb + b;
            }
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&self.values[k][idx * d..(idx + 1) * d]) {
                *o += w * v;
            }
        }
        let nn = norm(out);
        if nn > self.n_bound {
            out.iter_mut().for_each(|o| *o *= self.n_bound / nn);
        }
    }
}

/// Bins the optimal drift of a solved level over `(step, X, I)`.
pub fn nu_star(sol: &BackwardSolution, bundle: &PathBundle, cfg: &NuStarConfig) -> Result<NuTable> {
    if sol.n_paths != bundle.n_paths || sol.steps != bundle.steps() {
        return Err(Error::InvalidArgument("solution was not computed on this bundle".into()));
    }
    if cfg.bins < 2 || !(0.0..0.5).contains(&cfg.tail) {
        return Err(Error::InvalidArgument(format!("bad nu* config {cfg:?}")));
    }
    let (d, steps, n) = (sol.dim, sol.steps, sol.n);
    let rows: Vec<usize> = (0..sol.n_paths).filter(|&p| sol.active[p]).collect();
    let mut table = NuTable {
        steps,
        dim: d,
        dt: bundle.grid.dt(),
        n_bound: n,
        bins: cfg.bins,
        rule: cfg.rule,
        lo: Vec::with_capacity(steps),
        hi: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        counts: Vec::with_capacity(steps),
        empty_cells: 0,
    };
    let mut total_cells = 0;
    for k in 0..steps {
        let mut lo = Vec::with_capacity(2 * d);
        let mut hi = Vec::with_capacity(2 * d);
        for ax in 0..2 * d {
            let col: Vec<f64> = rows.iter().map(|&p| if ax < d { bundle.x_at(p, k)[ax] } else { bundle.i_at(p, k)[ax - d] }).collect();
            lo.push(quantile(&col, cfg.tail));
            hi.push(quantile(&col, 1.0 - cfg.tail));
        }
        table.lo.push(lo);
        table.hi.push(hi);
        let cells: usize = (0..2 * d).map(|ax| table.axis_bins(table.lo[k][ax], table.hi[k][ax])).product();
        let mut sums = vec![0.0; cells * d];
        let mut counts = vec![0u32; cells];
        let mut coords = vec![0.0; 2 * d];
        for &p in &rows {
            coords[..d].copy_from_slice(bundle.x_at(p, k));
            coords[d..].copy_from_slice(bundle.i_at(p, k));
            let c = table.cell_of(k, &coords);
            counts[c] += 1;
            match cfg.rule {
                NuRule::Argmin => {
                    for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(sol.nu_at(p, k)) {
                        *s += v;
                    }
                }
                NuRule::SignOfV => {
                    let v = sol.v_at(p, k);
                    let nv = norm(v);
                    if nv >= 1e-12 {
                        for (s, vj) in sums[c * d..(c + 1) * d].iter_mut().zip(v) {
                            *s -= n * vj / nv;
                        }
                    }
                }
            }
        }
        for c in 0..cells {
            if counts[c] > 0 {
                sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= counts[c] as f64);
            }
        }
        table.empty_cells += counts.iter().filter(|c| **c == 0).count();
        total_cells += cells;
        table.values.push(sums);
        table.counts.push(counts);
    }
    if table.empty_cells > 0 {
        log::warn!("nu* table: {} of {total_cells} cells empty, set to zero", table.empty_cells);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichEntry {
    pub label: String,
    pub estimate: TiltedValueEstimate,
    /// `estimate + 3σ >= u_n`
    pub above: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub n: f64,
    pub u_n: Estimate,
    pub entries: Vec<SandwichEntry>,
    pub min_label: String,
    pub min: Estimate,
    /// Every trial `>= u_n - 3σ_combined`.
    pub lower_ok: bool,
    /// Each optimizer trial within `3σ_combined` of `u_n`; `None` without one.
    pub optimizer_ok: Option<bool>,
}

/// Runs each trial control on the same fresh paths and compares with `u_n`.
#[allow(clippy::too_many_arguments)]
pub fn dual_sandwich(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    a: &[f64],
    n: f64,
    trials: &[(String, Control)],
    u_n: Estimate,
    sim: &SimOptions,
    gamma: &GammaSource,
) -> Result<SandwichReport> {
    if trials.is_empty() {
        return Err(Error::InvalidArgument("at least one control required".into()));
    }
    let mut entries = Vec::with_capacity(trials.len());
    let mut optimizer_ok: Option<bool> = None;
    for (label, ctl) in trials {
        let est = dual_estimate(spec, grid, x, a, ctl, n, sim, gamma)?;
        let band = 3.0 * est.estimate.combined(&u_n);
        let above = est.estimate.value >= u_n.value - band;
        if ctl.is_optimizer() {
            let ok = (est.estimate.value - u_n.value).abs() <= band;
            optimizer_ok = Some(optimizer_ok.unwrap_or(true) && ok);
        }
        entries.push(SandwichEntry { label: label.clone(), estimate: est, above });
    }
    let best = entries.iter().min_by(|a, b| a.estimate.estimate.value.total_cmp(&b.estimate.estimate.value)).unwrap();
    Ok(SandwichReport {
        n,
        u_n,
        min_label: best.label.clone(),
        min: best.estimate.estimate,
        lower_ok: entries.iter().all(|e| e.above),
        entries,
        optimizer_ok,
    })
}
