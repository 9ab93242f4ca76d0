//! Problem instances, the standing-assumption validator and the Fenchel
//! conjugate `f(x, a, y) = -inf_z [a·z + F(x, y, z)]`.

mod custom;
mod registry;

pub use custom::{AffineMatrix, AffineVector, CustomConfig, HamiltonianTable, Monomial, Polynomial, ZTerm};
pub use registry::{by_name, default_lq, exp_utility, kpz, kpz_with, lq, power_utility, ExpUtilityParams, LqParams, PowerUtilityParams, KPZ_LAMBDA};

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{golden_min, norm};
use crate::{Error, Result};

pub type VecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `F(x, y, z)`
pub type HamiltonianFn = Arc<dyn Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// `f(x, a, y)`
pub type ConjugateFn = Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>;

/// Growth constants of the standing assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthProfile {
    pub p_rho: f64,
    pub p: f64,
    pub q: f64,
    pub p_f: f64,
    pub q_f: f64,
    pub p_g: f64,
    pub q_g: f64,
    pub m_f: f64,
    pub big_m_f: f64,
    pub m_g: f64,
    pub big_m_g: f64,
    pub l_f: f64,
    pub m_rho: f64,
    pub l_coef: f64,
}

impl GrowthProfile {
    pub fn p_conj(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn q_conj(&self) -> f64 {
        self.q / (self.q - 1.0)
    }

    /// Exponent of `|x|` in the growth bound of `u`.
    pub fn x_exponent(&self) -> f64 {
        self.p_f.max(self.q_f).max(self.p_g).max(self.q_g)
    }

    /// Exponent of `|a|` in the a-priori bound of `Y^n`.
    pub fn a_exponent(&self) -> f64 {
        let base = self.p_f.max(self.q_g);
        if self.p_rho < 1.0 {
            (base / (1.0 - self.p_rho)).max(self.p_conj())
        } else {
            base.max(self.p_conj())
        }
    }

    /// Exponent relations only; no function sampling.
    pub fn check_exponents(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let mut rule = |name: &str, ok: bool, detail: String| {
            out.push(Finding { check: name.to_string(), passed: ok, detail, worst_point: None });
        };
        rule("p_rho in [0,1]", (0.0..=1.0).contains(&self.p_rho), format!("p_rho = {}", self.p_rho));
        rule("p > 1", self.p > 1.0, format!("p = {}", self.p));
        rule("q >= p", self.q >= self.p, format!("q = {}, p = {}", self.q, self.p));
        let nonneg = [
            ("p_F", self.p_f),
            ("q_F", self.q_f),
            ("p_g", self.p_g),
            ("q_g", self.q_g),
            ("m_F", self.m_f),
            ("M_F", self.big_m_f),
            ("m_g", self.m_g),
            ("M_g", self.big_m_g),
            ("L_F", self.l_f),
            ("M_rho", self.m_rho),
            ("L_coef", self.l_coef),
        ];
        for (name, v) in nonneg {
            rule(&format!("{name} >= 0"), v >= 0.0 && v.is_finite(), format!("{name} = {v}"));
        }
        if self.p_rho < 1.0 {
            let bar = (1.0 - self.p_rho) * self.q / (self.q - 1.0);
            rule("q_F < (1-p_rho)q/(q-1)", self.q_f < bar, format!("q_F = {}, bound = {bar}", self.q_f));
            rule("p_g < (1-p_rho)q/(q-1)", self.p_g < bar, format!("p_g = {}, bound = {bar}", self.p_g));
        } else {
            rule("q_F must be 0 when p_rho=1", self.q_f == 0.0, format!("q_F = {}", self.q_f));
            rule("p_g must be 0 when p_rho=1", self.p_g == 0.0, format!("p_g = {}", self.p_g));
        }
        out
    }
}

/// How the search radius for the numeric conjugate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusPolicy {
    /// `R` solves `m_F/p R^{p-1} = |a| + margin`.
    Coercive { margin: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateConfig {
    pub radius: RadiusPolicy,
    /// Grid points per axis; the scan visits `grid_points^d` nodes.
    pub grid_points: usize,
    pub refine_iters: usize,
    pub tol: f64,
    /// Used when the coercive rule is unavailable (`m_F = 0`).
    pub fallback_radius: f64,
}

impl Default for ConjugateConfig {
    fn default() -> Self {
        Self {
            radius: RadiusPolicy::Coercive { margin: 1.0 },
            grid_points: 101,
            refine_iters: 4,
            tol: 1e-10,
            fallback_radius: 100.0,
        }
    }
}

impl ConjugateConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid_points < 3 {
            return Err(Error::InvalidArgument("grid_points must be >= 3".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        Ok(())
    }

    fn radius(&self, a: &[f64], growth: &GrowthProfile) -> f64 {
        match self.radius {
            RadiusPolicy::Fixed(r) => r,
            RadiusPolicy::Coercive { margin } => {
                if growth.m_f <= 0.0 {
                    return self.fallback_radius;
                }
                let rhs = norm(a) + margin;
                (growth.p * rhs / growth.m_f).powf(1.0 / (growth.p - 1.0))
            }
        }
    }
}

/// One viscous Hamilton-Jacobi instance.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub drift: VecFn,
    /// Row-major `d x d`.
    pub sigma: VecFn,
    /// Row-major `d x d`; the control volatility `ϱ`.
    pub rho: VecFn,
    pub hamiltonian: HamiltonianFn,
    pub terminal: ScalarFn,
    pub horizon: f64,
    pub growth: GrowthProfile,
    pub conjugate_closed_form: Option<ConjugateFn>,
    /// Used whenever the closed form is absent.
    pub conjugate_cfg: ConjugateConfig,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("growth", &self.growth)
            .field("closed_form", &self.conjugate_closed_form.is_some())
            .finish()
    }
}

impl ProblemSpec {
    /// Generator `f(x, a, y)` for the solvers. Numeric failures become NaN and
    /// are caught by the solvers' finiteness checks.
    pub fn f(&self, x: &[f64], a: &[f64], y: f64) -> f64 {
        match &self.conjugate_closed_form {
            Some(cf) => cf(x, a, y),
            None => numeric_conjugate(self, &self.conjugate_cfg, x, a, y).unwrap_or(f64::NAN),
        }
    }

    /// `sup |f(x, a, y) - f(x, a, 0)| / |y|` is bounded by this.
    pub fn lipschitz_y(&self) -> f64 {
        self.growth.l_f
    }

    /// Checks output shapes at the origin and basic field domains.
    pub fn check_structure(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Structural("dim must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Structural(format!("horizon must be positive, got {}", self.horizon)));
        }
        let x0 = vec![0.0; d];
        let checks = [("drift", (self.drift)(&x0).len(), d), ("sigma", (self.sigma)(&x0).len(), d * d), ("rho", (self.rho)(&x0).len(), d * d)];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Structural(format!("{name} returned {got} entries, expected {want}")));
            }
        }
        if !(self.hamiltonian)(&x0, 0.0, &x0).is_finite() {
            return Err(Error::Structural("F(0,0,0) is not finite".into()));
        }
        if !(self.terminal)(&x0).is_finite() {
            return Err(Error::Structural("g(0) is not finite".into()));
        }
        Ok(())
    }
}

/// One pass/fail line of [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub check: String,
    pub passed: bool,
    pub detail: String,
    pub worst_point: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.iter().all(|f| f.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| !f.passed)
    }
}

/// Sampling parameters for the function-level checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateConfig {
    pub samples: usize,
    pub box_radius: f64,
    pub seed: u64,
    /// Relative slack on every inequality.
    pub tol: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { samples: 512, box_radius: 4.0, seed: 7, tol: 1e-9 }
    }
}

fn frob_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_box(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-r..=r)).collect()
}

/// Tracks the worst slack of a sampled inequality `lhs <= rhs`.
struct Worst {
    name: &'static str,
    tol: f64,
    worst: f64,
    point: Option<Vec<f64>>,
    detail: String,
}

impl Worst {
    fn new(name: &'static str, tol: f64) -> Self {
        Self { name, tol, worst: f64::NEG_INFINITY, point: None, detail: String::new() }
    }

    fn record(&mut self, lhs: f64, rhs: f64, point: impl FnOnce() -> Vec<f64>) {
        let excess = if lhs.is_nan() || rhs.is_nan() { f64::INFINITY } else { lhs - rhs - self.tol * (1.0 + rhs.abs()) };
        if excess > self.worst {
            self.worst = excess;
            self.detail = format!("lhs = {lhs:.6e}, rhs = {rhs:.6e}");
            self.point = Some(point());
        }
    }

    fn finish(self) -> Finding {
        let passed = self.worst <= 0.0;
        Finding {
            check: self.name.to_string(),
            passed,
            detail: if passed { format!("ok (worst {})", self.detail) } else { self.detail },
            worst_point: if passed { None } else { self.point },
        }
    }
}

/// Checks the standing assumptions: exponent relations exactly, function-level
/// Lipschitz/growth/convexity conditions on random samples.
///
/// Continuity of `x -> f` is assumed, not tested.
pub fn validate(spec: &ProblemSpec, cfg: &ValidateConfig) -> Result<ValidationReport> {
    spec.check_structure()?;
    let g = &spec.growth;
    let d = spec.dim;
    let mut findings = g.check_exponents();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.box_radius;

    let mut lip = Worst::new("lipschitz b, sigma, rho", cfg.tol);
    let mut rho_growth = Worst::new("rho growth", cfg.tol);
    let mut lip_y = Worst::new("F lipschitz in y", cfg.tol);
    let mut convex = Worst::new("F convex in z", cfg.tol);
    let mut f_lower = Worst::new("F lower bound", cfg.tol);
    let mut f_upper = Worst::new("F upper bound", cfg.tol);
    let mut g_lower = Worst::new("g lower bound", cfg.tol);
    let mut g_upper = Worst::new("g upper bound", cfg.tol);

    for _ in 0..cfg.samples {
        let x = sample_box(&mut rng, d, r);
        let x2 = sample_box(&mut rng, d, r);
        let z = sample_box(&mut rng, d, r);
        let z2 = sample_box(&mut rng, d, r);
        let y: f64 = rng.random_range(-r..=r);
        let y2: f64 = rng.random_range(-r..=r);

        let dx = frob_diff(&x, &x2);
        let lhs = frob_diff(&(spec.drift)(&x), &(spec.drift)(&x2))
            + frob_diff(&(spec.sigma)(&x), &(spec.sigma)(&x2))
            + frob_diff(&(spec.rho)(&x), &(spec.rho)(&x2));
        lip.record(lhs, g.l_coef * dx, || [x.clone(), x2.clone()].concat());

        let rho_norm = norm(&(spec.rho)(&x));
        rho_growth.record(rho_norm, g.m_rho * (1.0 + norm(&x).powf(g.p_rho)), || x.clone());

        let fy = (spec.hamiltonian)(&x, y, &z);
        let fy2 = (spec.hamiltonian)(&x, y2, &z);
        lip_y.record((fy - fy2).abs(), g.l_f * (y - y2).abs(), || [x.clone(), vec![y, y2], z.clone()].concat());

        let zm: Vec<f64> = z.iter().zip(&z2).map(|(u, v)| 0.5 * (u + v)).collect();
        let mid = (spec.hamiltonian)(&x, y, &zm);
        let avg = 0.5 * (fy + (spec.hamiltonian)(&x, y, &z2));
        convex.record(mid, avg, || [z.clone(), z2.clone()].concat());

        let f0 = (spec.hamiltonian)(&x, 0.0, &z);
        let nx = norm(&x);
        let nz = norm(&z);
        let lo = -g.m_f * (1.0 + nx.powf(g.p_f) - nz.powf(g.p) / g.p);
        let hi = g.big_m_f * (1.0 + nx.powf(g.q_f) + nz.powf(g.q) / g.q);
        f_lower.record(lo, f0, || [x.clone(), z.clone()].concat());
        f_upper.record(f0, hi, || [x.clone(), z.clone()].concat());

        let gx = (spec.terminal)(&x);
        g_lower.record(-g.m_g * (1.0 + nx.powf(g.p_g)), gx, || x.clone());
        g_upper.record(gx, g.big_m_g * (1.0 + nx.powf(g.q_g)), || x.clone());
    }
    if convex.worst > 0.0 {
        log::warn!("{}: {}", spec.name, Error::ConcaveHamiltonian);
    }
    findings.extend([lip, rho_growth, lip_y, convex, f_lower, f_upper, g_lower, g_upper].map(Worst::finish));
    Ok(ValidationReport { findings })
}

/// `f(x, a, y)`: the closed form when present, the numeric conjugate otherwise.
pub fn conjugate(spec: &ProblemSpec, cfg: &ConjugateConfig, x: &[f64], a: &[f64], y: f64) -> Result<f64> {
    if a.len() != spec.dim || x.len() != spec.dim {
        return Err(Error::Structural(format!("x and a must have length {}", spec.dim)));
    }
    match &spec.conjugate_closed_form {
        Some(cf) => Ok(cf(x, a, y)),
        None => numeric_conjugate(spec, cfg, x, a, y),
    }
}

/// Numeric conjugate: grid scan of `a·z + F(x,y,z)` over the box `|z_i| <= R`,
/// then per-coordinate golden-section polish. Grid ties go to the smallest
/// `|z|`. The radius is doubled if the minimizer sits on the box boundary.
pub fn numeric_conjugate(spec: &ProblemSpec, cfg: &ConjugateConfig, x: &[f64], a: &[f64], y: f64) -> Result<f64> {
    cfg.check()?;
    let d = spec.dim;
    let obj = |z: &[f64]| crate::stats::dot(a, z) + (spec.hamiltonian)(x, y, z);
    let mut radius = cfg.radius(a, &spec.growth);
    for _ in 0..8 {
        let (z, val) = grid_argmin(d, radius, cfg.grid_points, &obj)?;
        let h = 2.0 * radius / (cfg.grid_points - 1) as f64;
        let on_edge = z.iter().any(|zi| zi.abs() >= radius - 0.5 * h);
        if on_edge && matches!(cfg.radius, RadiusPolicy::Coercive { .. }) {
            radius *= 2.0;
            continue;
        }
        let (_, best) = polish(z, val, h, cfg, &obj);
        return Ok(-best);
    }
    Err(Error::InvalidArgument(format!("conjugate infimum not attained within radius {radius}")))
}

fn grid_argmin(d: usize, radius: f64, pts: usize, obj: &impl Fn(&[f64]) -> f64) -> Result<(Vec<f64>, f64)> {
    let h = 2.0 * radius / (pts - 1) as f64;
    let total = pts.checked_pow(d as u32).ok_or_else(|| Error::InvalidArgument("conjugate grid too large".into()))?;
    let mut z = vec![0.0; d];
    let mut best = f64::INFINITY;
    let mut best_z = vec![0.0; d];
    let mut best_norm = f64::INFINITY;
    for idx in 0..total {
        let mut rem = idx;
        for zi in z.iter_mut() {
            *zi = -radius + h * (rem % pts) as f64;
            rem /= pts;
        }
        let v = obj(&z);
        if !v.is_finite() {
            return Err(Error::NonFinite { z: z.clone() });
        }
        let nz = norm(&z);
        let tie = (v - best).abs() <= 1e-14 * (1.0 + best.abs());
        if (v < best && !tie) || (tie && nz < best_norm) {
            best = v;
            best_norm = nz;
            best_z.copy_from_slice(&z);
        }
    }
    Ok((best_z, best))
}

fn polish(mut z: Vec<f64>, mut val: f64, h: f64, cfg: &ConjugateConfig, obj: &impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut width = h;
    for _ in 0..cfg.refine_iters {
        for i in 0..z.len() {
            let centre = z[i];
            let mut probe = z.clone();
            let (zi, v) = golden_min(centre - width, centre + width, cfg.tol, 200, |t| {
                probe[i] = t;
                obj(&probe)
            });
            if v < val {
                val = v;
                z[i] = zi;
            }
        }
        width = (width * 0.25).max(cfg.tol * 10.0);
    }
    (z, val)
}

/// Recovers `F(x, y, z) = -inf_a [a·z + f(x, a, y)]` over the box
/// `|a_i| <= a_radius` (duality round trip).
pub fn reconstruct_hamiltonian(spec: &ProblemSpec, x: &[f64], y: f64, z: &[f64], a_radius: f64, a_points: usize) -> f64 {
    let obj = |a: &[f64]| crate::stats::dot(a, z) + spec.f(x, a, y);
    let cfg = ConjugateConfig { grid_points: a_points, ..ConjugateConfig::default() };
    match grid_argmin(spec.dim, a_radius, a_points, &obj) {
        Ok((a, v)) => -polish(a, v, 2.0 * a_radius / (a_points - 1) as f64, &cfg, &obj).1,
        Err(_) => f64::NAN,
    }
}

/// Result of [`conjugate_crosscheck`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub samples: usize,
    pub max_discrepancy: f64,
    /// `"closed_form"` or `"refined_numeric"`.
    pub reference: String,
}

/// Numeric conjugate against the closed form (or against a run with twice the
/// grid density), plus the y-Lipschitz and two-sided growth bounds of `f` on
/// every sample. The first bound violation is returned as an error.
pub fn conjugate_crosscheck(spec: &ProblemSpec, cfg: &ConjugateConfig, sample_count: usize, seed: u64) -> Result<CrosscheckReport> {
    spec.check_structure()?;
    let d = spec.dim;
    let g = &spec.growth;
    let refined = ConjugateConfig { grid_points: 2 * cfg.grid_points - 1, ..cfg.clone() };
    let reference = |x: &[f64], a: &[f64], y: f64| -> Result<f64> {
        match &spec.conjugate_closed_form {
            Some(cf) => Ok(cf(x, a, y)),
            None => numeric_conjugate(spec, &refined, x, a, y),
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_disc: f64 = 0.0;
    let tol = 1e-7;
    for _ in 0..sample_count {
        let x = sample_box(&mut rng, d, 2.0);
        let a = sample_box(&mut rng, d, 3.0);
        let y: f64 = rng.random_range(-2.0..=2.0);
        let y2: f64 = rng.random_range(-2.0..=2.0);
        let num = numeric_conjugate(spec, cfg, &x, &a, y)?;
        let r = reference(&x, &a, y)?;
        max_disc = max_disc.max((num - r).abs());
        let sample = || [x.clone(), a.clone(), vec![y, y2]].concat();

        let r2 = reference(&x, &a, y2)?;
        if (r - r2).abs() > g.l_f * (y - y2).abs() + tol * (1.0 + r.abs()) {
            return Err(Error::AssumptionViolation {
                check: "f lipschitz in y".into(),
                sample: sample(),
                detail: format!("|f(y) - f(y')| = {:.6e} > L_F |y - y'| = {:.6e}", (r - r2).abs(), g.l_f * (y - y2).abs()),
            });
        }

        let f0 = reference(&x, &a, 0.0)?;
        let nx = norm(&x);
        let na = norm(&a);
        if g.m_f > 0.0 {
            let pc = g.p_conj();
            let hi = g.m_f * (1.0 + nx.powf(g.p_f) + na.powf(pc) / (pc * g.m_f.powf(pc)));
            if f0 > hi + tol * (1.0 + hi.abs()) {
                return Err(Error::AssumptionViolation {
                    check: "f upper growth bound".into(),
                    sample: sample(),
                    detail: format!("f(x,a,0) = {f0:.6e} > {hi:.6e}"),
                });
            }
        }
        if g.big_m_f > 0.0 {
            let qc = g.q_conj();
            let lo = -g.big_m_f * (1.0 + nx.powf(g.q_f) - na.powf(qc) / (qc * g.big_m_f.powf(qc)));
            if f0 < lo - tol * (1.0 + lo.abs()) {
                return Err(Error::AssumptionViolation {
                    check: "f lower growth bound".into(),
                    sample: sample(),
                    detail: format!("f(x,a,0) = {f0:.6e} < {lo:.6e}"),
                });
            }
        }
    }
    Ok(CrosscheckReport {
        samples: sample_count,
        max_discrepancy: max_disc,
        reference: if spec.conjugate_closed_form.is_some() { "closed_form" } else { "refined_numeric" }.into(),
    })
}

/// Picks `(p, m_F)` so that `c_z |z|^2 - c_x (1 + |x|^{p_F})` dominates the
/// lower template `-m_F (1 + |x|^{p_F} - |z|^p / p)`.
pub(crate) fn fit_lower_template(c_z: f64, c_x: f64) -> (f64, f64) {
    if c_x <= 2.0 * c_z {
        return (2.0, 2.0 * c_z);
    }
    let m = c_x;
    let mut p = 2.0;
    while p > 1.01 {
        p -= 0.01;
        // sup_r m r^p / p - c_z r^2, attained where m r^{p-1} = 2 c_z r
        let r = (m / (2.0 * c_z)).powf(1.0 / (2.0 - p));
        if m * r.powf(p) / p - c_z * r * r <= m {
            return (p, m);
        }
    }
    (1.01, m)
}
