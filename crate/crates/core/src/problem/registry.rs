//! Built-in problem instances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{fit_lower_template, ConjugateConfig, GrowthProfile, ProblemSpec, ScalarFn, VecFn};
use crate::{Error, Result};

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// KPZ with `g(x) = Σ cos(x_i)`, `F(z) = λ|z|²`, `σ = ϱ = I`, `b = 0`.
pub fn kpz(lambda: f64, dim: usize, horizon: f64) -> ProblemSpec {
    let g: ScalarFn = Arc::new(|x: &[f64]| x.iter().map(|v| v.cos()).sum());
    kpz_with(lambda, dim, horizon, g, dim as f64, dim as f64)
}

/// KPZ with a user terminal condition bounded by `-m_g <= g <= M_g`.
pub fn kpz_with(lambda: f64, dim: usize, horizon: f64, g: ScalarFn, m_g: f64, big_m_g: f64) -> ProblemSpec {
    let id = identity(dim);
    let id2 = id.clone();
    ProblemSpec {
        name: "kpz".into(),
        dim,
        drift: Arc::new(move |x: &[f64]| vec![0.0; x.len()]),
        sigma: Arc::new(move |_: &[f64]| id.clone()),
        rho: Arc::new(move |_: &[f64]| id2.clone()),
        hamiltonian: Arc::new(move |_: &[f64], _: f64, z: &[f64]| lambda * z.iter().map(|v| v * v).sum::<f64>()),
        terminal: g,
        horizon,
        growth: GrowthProfile {
            p_rho: 0.0,
            p: 2.0,
            q: 2.0,
            p_f: 0.0,
            q_f: 0.0,
            p_g: 0.0,
            q_g: 0.0,
            m_f: 2.0 * lambda,
            big_m_f: 2.0 * lambda,
            m_g,
            big_m_g,
            l_f: 0.0,
            m_rho: (dim as f64).sqrt(),
            l_coef: 0.0,
        },
        conjugate_closed_form: Some(Arc::new(move |_: &[f64], a: &[f64], _: f64| a.iter().map(|v| v * v).sum::<f64>() / (4.0 * lambda))),
        conjugate_cfg: ConjugateConfig::default(),
    }
}

/// Linear-quadratic regulator data: `dX = (AX + Bα)ds + (CX + D)dW`, running
/// cost `XᵀQX + R|α|²`, terminal `XᵀSX`. `C` must vanish when `d > 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: f64,
    pub s: DMatrix<f64>,
    pub horizon: f64,
}

impl LqParams {
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(a: f64, b: f64, c: f64, d: f64, q: f64, r: f64, s: f64, horizon: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self { a: m(a), b: m(b), c: m(c), d: m(d), q: m(q), r, s: m(s), horizon }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.dim();
        for (name, m) in [("A", &self.a), ("B", &self.b), ("C", &self.c), ("D", &self.d), ("Q", &self.q), ("S", &self.s)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Structural(format!("{name} must be {n}x{n}")));
            }
        }
        if n > 1 && self.c.iter().any(|v| *v != 0.0) {
            return Err(Error::Structural("state-dependent volatility C is supported only for d = 1".into()));
        }
        if !(self.r > 0.0) {
            return Err(Error::Structural("R must be positive".into()));
        }
        if (&self.s - self.s.transpose()).amax() > 1e-12 {
            return Err(Error::Structural("S must be symmetric".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Structural("horizon must be positive".into()));
        }
        Ok(())
    }
}

fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    v.dot(&(m * &v))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// LQ control problem as an HJ instance with `ϱ = B`, `σ(x) = Cx + D`,
/// `F = -xᵀQx + |z|²/(4R)`, `f = xᵀQx + R|a|²`, `g = xᵀSx`.
pub fn lq(params: &LqParams) -> Result<ProblemSpec> {
    params.check()?;
    let n = params.dim();
    let (a, c, dm, q, s, r) = (params.a.clone(), params.c[(0, 0)], params.d.clone(), params.q.clone(), params.s.clone(), params.r);
    let b_rm = row_major(&params.b);
    let d_rm = row_major(&dm);
    let q2 = q.clone();
    let q_eigs = q.clone().symmetric_eigen().eigenvalues;
    let s_eigs = s.clone().symmetric_eigen().eigenvalues;
    let q_max = q_eigs.max().max(0.0);
    let q_min = q_eigs.min();
    let s_max = s_eigs.max();
    let s_min = s_eigs.min();
    // F(x,0,z) >= |z|²/(4R) - q_max |x|²
    let (p, m_f) = fit_lower_template(1.0 / (4.0 * r), q_max.max(1e-12));
    let sigma: VecFn = if n == 1 {
        let d0 = dm[(0, 0)];
        Arc::new(move |x: &[f64]| vec![c * x[0] + d0])
    } else {
        Arc::new(move |_: &[f64]| d_rm.clone())
    };
    let general = ProblemSpec {
        name: "lq".into(),
        dim: n,
        drift: Arc::new(move |x: &[f64]| (&a * DVector::from_column_slice(x)).as_slice().to_vec()),
        sigma,
        rho: Arc::new(move |_: &[f64]| b_rm.clone()),
        hamiltonian: Arc::new(move |x: &[f64], _: f64, z: &[f64]| -quad_form(&q, x) + z.iter().map(|v| v * v).sum::<f64>() / (4.0 * r)),
        terminal: Arc::new(move |x: &[f64]| quad_form(&s, x)),
        horizon: params.horizon,
        growth: GrowthProfile {
            p_rho: 0.0,
            p,
            q: 2.0,
            p_f: 2.0,
            q_f: 0.0,
            p_g: if s_min >= 0.0 { 0.0 } else { 2.0 },
            q_g: 2.0,
            m_f,
            big_m_f: (1.0 / (2.0 * r)).max(-q_min).max(0.0),
            m_g: (-s_min).max(0.0),
            big_m_g: s_max.max(0.0),
            l_f: 0.0,
            m_rho: params.b.norm(),
            l_coef: params.a.norm() + params.c.norm(),
        },
        conjugate_closed_form: Some(Arc::new(move |x: &[f64], a: &[f64], _: f64| quad_form(&q2, x) + r * a.iter().map(|v| v * v).sum::<f64>())),
        conjugate_cfg: ConjugateConfig::default(),
    };
    if n == 1 {
        // scalar closures; the general ones allocate on every call
        let (a0, q0, s0) = (params.a[(0, 0)], params.q[(0, 0)], params.s[(0, 0)]);
        return Ok(ProblemSpec {
            drift: Arc::new(move |x: &[f64]| vec![a0 * x[0]]),
            hamiltonian: Arc::new(move |x: &[f64], _: f64, z: &[f64]| -q0 * x[0] * x[0] + z[0] * z[0] / (4.0 * r)),
            terminal: Arc::new(move |x: &[f64]| s0 * x[0] * x[0]),
            conjugate_closed_form: Some(Arc::new(move |x: &[f64], a: &[f64], _: f64| q0 * x[0] * x[0] + r * a[0] * a[0])),
            ..general
        });
    }
    Ok(general)
}

/// Power-utility portfolio problem in a one-factor model (OU factor, affine
/// Sharpe ratio), already flipped to the convex form `ũ = -u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerUtilityParams {
    pub gamma: f64,
    pub rate: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub correlation: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub horizon: f64,
}

impl Default for PowerUtilityParams {
    fn default() -> Self {
        Self { gamma: -1.0, rate: 0.02, kappa: 1.0, theta: 0.0, sigma: 0.3, correlation: -0.5, lambda0: 0.2, lambda1: 0.5, horizon: 1.0 }
    }
}

pub fn power_utility(p: &PowerUtilityParams) -> Result<ProblemSpec> {
    if p.gamma >= 1.0 || p.gamma == 0.0 {
        return Err(Error::Structural("power utility needs gamma < 1, gamma != 0".into()));
    }
    let k = p.gamma / (1.0 - p.gamma);
    let big_m = 1.0 + k * p.correlation * p.correlation;
    if big_m <= 0.0 {
        return Err(Error::Structural("M = 1 + γ/(1-γ) ρ² must be positive".into()));
    }
    let (l0, l1, gr) = (p.lambda0, p.lambda1, p.gamma * p.rate);
    let lam = move |x: f64| l0 + l1 * x;
    let h = move |x: f64| gr + 0.5 * k * lam(x) * lam(x);
    let drift_shift = k * p.sigma * p.correlation;
    let (kappa, theta, sig) = (p.kappa, p.theta, p.sigma);
    // h >= -(c0 + c1 |x|^2) with the bounds below when k < 0
    let c_x = if k < 0.0 {
        (p.gamma * p.rate).abs() + (-k) * (p.lambda0 * p.lambda0).max(p.lambda1 * p.lambda1)
    } else {
        (p.gamma * p.rate).abs()
    };
    let (pl, m_f) = fit_lower_template(0.5 * big_m, c_x.max(1e-12));
    Ok(ProblemSpec {
        name: "power_utility".into(),
        dim: 1,
        drift: Arc::new(move |x: &[f64]| vec![kappa * (theta - x[0]) + drift_shift * lam(x[0])]),
        sigma: Arc::new(move |_: &[f64]| vec![sig]),
        rho: Arc::new(move |_: &[f64]| vec![sig]),
        hamiltonian: Arc::new(move |x: &[f64], _: f64, z: &[f64]| 0.5 * big_m * z[0] * z[0] + h(x[0])),
        terminal: Arc::new(|_: &[f64]| 0.0),
        horizon: p.horizon,
        growth: GrowthProfile {
            p_rho: 0.0,
            p: pl,
            q: 2.0,
            p_f: 2.0,
            q_f: if k < 0.0 { 0.0 } else { 2.0 },
            p_g: 0.0,
            q_g: 0.0,
            m_f,
            big_m_f: big_m.max((p.gamma * p.rate).abs()).max(if k > 0.0 { k * (p.lambda0.powi(2) + p.lambda1.powi(2)) } else { 0.0 }),
            m_g: 0.0,
            big_m_g: 0.0,
            l_f: 0.0,
            m_rho: p.sigma.abs(),
            l_coef: p.kappa.abs() + (drift_shift * p.lambda1).abs(),
        },
        conjugate_closed_form: Some(Arc::new(move |x: &[f64], a: &[f64], _: f64| a[0] * a[0] / (2.0 * big_m) - h(x[0]))),
        conjugate_cfg: ConjugateConfig::default(),
    })
}

/// Exponential-utility indifference price of a call on a non-traded OU
/// factor, flipped to the convex form `ũ = -u`, `g̃ = -(x - K)⁺`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpUtilityParams {
    pub gamma: f64,
    pub rate: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub correlation: f64,
    pub sharpe: f64,
    pub strike: f64,
    pub horizon: f64,
}

impl Default for ExpUtilityParams {
    fn default() -> Self {
        Self { gamma: 1.0, rate: 0.02, kappa: 1.0, theta: 0.0, sigma: 0.3, correlation: 0.5, sharpe: 0.2, strike: 0.0, horizon: 1.0 }
    }
}

pub fn exp_utility(p: &ExpUtilityParams) -> Result<ProblemSpec> {
    if !(p.gamma > 0.0) {
        return Err(Error::Structural("exponential utility needs gamma > 0".into()));
    }
    let w = 1.0 - p.correlation * p.correlation;
    if w <= 0.0 {
        return Err(Error::Structural("|correlation| must be < 1".into()));
    }
    let c0 = -p.gamma * p.rate - 0.5 * p.sharpe * p.sharpe / p.gamma;
    let (kappa, theta, sig, shift, strike) = (p.kappa, p.theta, p.sigma, p.sigma * p.correlation * p.sharpe, p.strike);
    let (pl, m_f) = fit_lower_template(0.5 * w, c0.abs().max(1e-12));
    Ok(ProblemSpec {
        name: "exp_utility".into(),
        dim: 1,
        drift: Arc::new(move |x: &[f64]| vec![kappa * (theta - x[0]) + shift]),
        sigma: Arc::new(move |_: &[f64]| vec![sig]),
        rho: Arc::new(move |_: &[f64]| vec![sig]),
        hamiltonian: Arc::new(move |_: &[f64], _: f64, z: &[f64]| 0.5 * w * z[0] * z[0] + c0),
        terminal: Arc::new(move |x: &[f64]| -(x[0] - strike).max(0.0)),
        horizon: p.horizon,
        growth: GrowthProfile {
            p_rho: 0.0,
            p: pl,
            q: 2.0,
            p_f: 0.0,
            q_f: 0.0,
            p_g: 1.0,
            q_g: 0.0,
            m_f,
            big_m_f: w.max(c0.abs()),
            m_g: 1.0 + strike.abs(),
            big_m_g: 0.0,
            l_f: 0.0,
            m_rho: sig.abs(),
            l_coef: kappa.abs(),
        },
        conjugate_closed_form: Some(Arc::new(move |_: &[f64], a: &[f64], _: f64| a[0] * a[0] / (2.0 * w) - c0)),
        conjugate_cfg: ConjugateConfig::default(),
    })
}

/// `λ` of the built-in KPZ instance.
pub const KPZ_LAMBDA: f64 = 0.5;

/// Parameters of the built-in LQ instance: `A = C = S = 0`, `B = D = Q = R = 1`,
/// `T = 1`, with value `tanh(T - t) x² + log cosh(T - t)`.
pub fn default_lq() -> LqParams {
    LqParams::scalar(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0)
}

/// Built-in instance by registry name with default parameters. `custom`
/// problems come from [`super::CustomConfig`] instead.
pub fn by_name(name: &str) -> Result<ProblemSpec> {
    match name {
        "kpz" => Ok(kpz(KPZ_LAMBDA, 1, 1.0)),
        "lq" => lq(&default_lq()),
        "power_utility" => power_utility(&PowerUtilityParams::default()),
        "exp_utility" => exp_utility(&ExpUtilityParams::default()),
        other => Err(Error::InvalidArgument(format!("unknown problem '{other}' (kpz, lq, power_utility, exp_utility, custom)"))),
    }
}
