#![allow(dead_code)]

use std::sync::Arc;

use vhj_core::problem::{ConjugateConfig, ConjugateFn, GrowthProfile, ProblemSpec};

pub fn loose_growth() -> GrowthProfile {
    GrowthProfile {
        p_rho: 0.0,
        p: 2.0,
        q: 2.0,
        p_f: 0.0,
        q_f: 0.0,
        p_g: 0.0,
        q_g: 0.0,
        m_f: 1.0,
        big_m_f: 1.0,
        m_g: 1.0,
        big_m_g: 1.0,
        l_f: 0.0,
        m_rho: 1.0,
        l_coef: 0.0,
    }
}

/// Constant-coefficient 1-D instance with `F(x,y,z) = c_z z² + c_y y` and
/// terminal `g`; `f = a²/(4 c_z) - c_y y`. With `c_z = 0` the generator is `f ≡ -c_y y`.
pub fn scalar(b: f64, sigma: f64, rho: f64, c_z: f64, c_y: f64, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ProblemSpec {
    let f: ConjugateFn = if c_z > 0.0 {
        Arc::new(move |_: &[f64], a: &[f64], y: f64| a[0] * a[0] / (4.0 * c_z) - c_y * y)
    } else {
        Arc::new(move |_: &[f64], _: &[f64], y: f64| -c_y * y)
    };
    ProblemSpec {
        name: "test".into(),
        dim: 1,
        drift: Arc::new(move |_: &[f64]| vec![b]),
        sigma: Arc::new(move |_: &[f64]| vec![sigma]),
        rho: Arc::new(move |_: &[f64]| vec![rho]),
        hamiltonian: Arc::new(move |_: &[f64], y: f64, z: &[f64]| c_z * z[0] * z[0] + c_y * y),
        terminal: Arc::new(move |x: &[f64]| g(x[0])),
        horizon: 1.0,
        growth: GrowthProfile { l_f: c_y.abs(), m_rho: rho.abs(), ..loose_growth() },
        conjugate_closed_form: Some(f),
        conjugate_cfg: ConjugateConfig::default(),
    }
}

/// `dX = dW`, no control, `f ≡ 0`.
pub fn heat(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ProblemSpec {
    scalar(0.0, 1.0, 0.0, 0.0, 0.0, g)
}

/// Frozen dynamics `b = σ = ϱ = 0` in dimension `d`.
pub fn frozen(d: usize) -> ProblemSpec {
    ProblemSpec {
        name: "frozen".into(),
        dim: d,
        drift: Arc::new(move |_: &[f64]| vec![0.0; d]),
        sigma: Arc::new(move |_: &[f64]| vec![0.0; d * d]),
        rho: Arc::new(move |_: &[f64]| vec![0.0; d * d]),
        hamiltonian: Arc::new(|_: &[f64], _: f64, z: &[f64]| z.iter().map(|v| v * v).sum()),
        terminal: Arc::new(|_: &[f64]| 0.0),
        horizon: 1.0,
        growth: loose_growth(),
        conjugate_closed_form: None,
        conjugate_cfg: ConjugateConfig::default(),
    }
}

/// Brownian `X` with `σ = I`, `ϱ = 0`, `b = 0` in dimension `d`.
pub fn brownian(d: usize) -> ProblemSpec {
    let mut id = vec![0.0; d * d];
    for i in 0..d {
        id[i * d + i] = 1.0;
    }
    ProblemSpec { sigma: Arc::new(move |_: &[f64]| id.clone()), ..frozen(d) }
}
