use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::problem::LqParams;
use crate::{Error, Result};

/// Quadratic value function `u(t, x) = xᵀP(t)x + s(t)·x + r(t)` on a uniform
/// time grid. The linear term only appears with `C ≠ 0, D ≠ 0` (`d = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub horizon: f64,
    pub h: f64,
    /// `P` at `t_k = k h`, `k = 0..=steps`.
    pub p: Vec<DMatrix<f64>>,
    pub s: Vec<DVector<f64>>,
    pub r: Vec<f64>,
}

impl RiccatiSolution {
    fn bracket(&self, t: f64) -> (usize, f64) {
        let steps = self.p.len() - 1;
        let u = (t / self.h).clamp(0.0, steps as f64);
        let k = (u.floor() as usize).min(steps.saturating_sub(1));
        (k, u - k as f64)
    }

    /// `P(t)`, linear between nodes.
    pub fn p_at(&self, t: f64) -> DMatrix<f64> {
        let (k, w) = self.bracket(t);
        if w == 0.0 {
            return self.p[k].clone();
        }
        &self.p[k] * (1.0 - w) + &self.p[k + 1] * w
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let (k, w) = self.bracket(t);
        let v = DVector::from_column_slice(x);
        let at = |j: usize| v.dot(&(&self.p[j] * &v)) + self.s[j].dot(&v) + self.r[j];
        if w == 0.0 {
            at(k)
        } else {
            (1.0 - w) * at(k) + w * at(k + 1)
        }
    }

    /// Largest `|P - Pᵀ|` entry over the grid.
    pub fn asymmetry(&self) -> f64 {
        self.p.iter().map(|m| (m - m.transpose()).amax()).fold(0.0, f64::max)
    }
}

type State = (DMatrix<f64>, DVector<f64>, f64);

/// Time derivatives `(P', s', r')` from matching powers of `x` in the HJB
/// equation under the quadratic ansatz.
fn rhs(pr: &LqParams, st: &State) -> State {
    let (p, s, _) = st;
    let bbt = &pr.b * pr.b.transpose() / pr.r;
    let c = pr.c[(0, 0)];
    let dp = -(pr.a.transpose() * p) - p * &pr.a - &pr.q + p * &bbt * p - p * (c * c);
    let ddt = &pr.d * pr.d.transpose();
    // s' = -2 C D P - Aᵀ s + P B Bᵀ s / R   (d = 1 when C ≠ 0)
    let mut ds = -(pr.a.transpose() * s) + p * &bbt * s;
    if c != 0.0 {
        ds[0] -= 2.0 * c * pr.d[(0, 0)] * p[(0, 0)];
    }
    let dr = -(&ddt * p).trace() + 0.25 * s.dot(&(&bbt * s));
    (dp, ds, dr)
}

fn axpy(st: &State, h: f64, k: &State) -> State {
    (&st.0 + &k.0 * h, &st.1 + &k.1 * h, st.2 + k.2 * h)
}

/// Classical RK4 backward from `P(T) = S`, `s(T) = 0`, `r(T) = 0`.
pub fn riccati_lq(params: &LqParams, ode_steps: usize) -> Result<RiccatiSolution> {
    params.check()?;
    if ode_steps == 0 {
        return Err(Error::InvalidArgument("ode_steps must be positive".into()));
    }
    let n = params.dim();
    let h = params.horizon / ode_steps as f64;
    let mut st: State = (params.s.clone(), DVector::zeros(n), 0.0);
    let mut ps = vec![st.0.clone()];
    let mut ss = vec![st.1.clone()];
    let mut rs = vec![st.2];
    for k in (0..ode_steps).rev() {
        // integrate in reversed time τ = T - t, so dY/dτ = -rhs
        let f = |y: &State| {
            let (a, b, c) = rhs(params, y);
            (-a, -b, -c)
        };
        let k1 = f(&st);
        let k2 = f(&axpy(&st, 0.5 * h, &k1));
        let k3 = f(&axpy(&st, 0.5 * h, &k2));
        let k4 = f(&axpy(&st, h, &k3));
        let mut next = axpy(&st, h / 6.0, &k1);
        next = axpy(&next, h / 3.0, &k2);
        next = axpy(&next, h / 3.0, &k3);
        next = axpy(&next, h / 6.0, &k4);
        // keep P exactly symmetric
        next.0 = (&next.0 + next.0.transpose()) * 0.5;
        if !next.0.iter().all(|v| v.is_finite() && v.abs() < 1e12) || !next.2.is_finite() {
            return Err(Error::RiccatiBlowUp { t: k as f64 * h });
        }
        st = next;
        ps.push(st.0.clone());
        ss.push(st.1.clone());
        rs.push(st.2);
    }
    ps.reverse();
    ss.reverse();
    rs.reverse();
    Ok(RiccatiSolution { horizon: params.horizon, h, p: ps, s: ss, r: rs })
}
