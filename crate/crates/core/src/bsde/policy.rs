//! Fitted continuation functions and the feedback control they induce.
//!
//! At step `k` the penalized generator `f - n|v|` is handled as a search over
//! the ball of radius `n·dt` around `I_k`:
//!
//! ```text
//! Y_k = min_{|a - I_k| <= n dt} C_k(X_k, a) + f(X_k, a, Y_k) dt
//! ```
//!
//! which is the one-step form of the dual formula with the tilt applied at the
//! start of the step. The argmin is the feedback control.

use std::sync::Arc;

use super::basis::{APart, StepBasis};
use crate::forward::TiltControl;
use crate::problem::ProblemSpec;
use crate::stats::norm;

/// Continuation model of one step.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub(crate) enum StepModel {
    Regressed {
        basis: StepBasis,
        coef: Vec<f64>,
        /// Search box from the empirical quantiles of `I_k`.
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// The start step, where every path sits at `(x0, a0)`: the continuation
    /// is tabulated over the candidate moves.
    Start { a0: Vec<f64>, moves: Vec<Vec<f64>>, values: Vec<f64> },
}

/// Result of the Picard-iterated ball search at one state.
#[derive(Debug, Clone)]
pub(crate) struct StepOutcome {
    pub y: f64,
    pub a: Vec<f64>,
    /// `C(I_k) + f(X_k, I_k, y_in) dt - Y_k >= 0`
    pub dk: f64,
    /// `|y_j - y_{j-1}|` per sweep, `y_0 = C(I_k)`.
    pub residuals: Vec<f64>,
}

/// The argmin feedback of a solved penalized BSDE, usable as a tilt.
#[derive(Clone)]
pub struct FeedbackPolicy {
    pub(crate) spec: ProblemSpec,
    pub(crate) dt: f64,
    pub n: f64,
    pub(crate) picard_iters: usize,
    offsets: Vec<f64>,
    pub(crate) models: Vec<Option<Arc<StepModel>>>,
}

impl std::fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedbackPolicy").field("n", &self.n).field("steps", &self.models.len()).finish()
    }
}

/// Offsets `r·j/m` for `j = 0, 1, -1, 2, -2, ...`, so ties go to the smallest move.
pub(crate) fn ball_offsets(radius: f64, points: usize) -> Vec<f64> {
    let m = (points.max(3) - 1) / 2;
    let h = radius / m as f64;
    let mut out = vec![0.0];
    for j in 1..=m {
        out.push(j as f64 * h);
        out.push(-(j as f64) * h);
    }
    out
}

impl FeedbackPolicy {
    pub(crate) fn new(spec: &ProblemSpec, dt: f64, n: f64, ball_points: usize, picard_iters: usize, steps: usize) -> Self {
        let offsets = ball_offsets(n * dt, ball_points);
        Self { spec: spec.clone(), dt, n, picard_iters, offsets, models: vec![None; steps] }
    }

    pub fn steps(&self) -> usize {
        self.models.len()
    }

    /// One ball search with `y` frozen. Returns `(min value, argmin, C(I_k))`.
    fn search(&self, model: &StepModel, x: &[f64], i: &[f64], y: f64, scratch: &mut Vec<f64>) -> (f64, Vec<f64>, f64) {
        let dt = self.dt;
        let spec = &self.spec;
        match model {
            StepModel::Start { a0, moves, values } => {
                let mut a = a0.clone();
                let mut best = (f64::INFINITY, a0.clone());
                for (s, c) in moves.iter().zip(values) {
                    for j in 0..a.len() {
                        a[j] = a0[j] + s[j];
                    }
                    let v = c + spec.f(x, &a, y) * dt;
                    if v < best.0 {
                        best = (v, a.clone());
                    }
                }
                (best.0, best.1, values[0])
            }
            StepModel::Regressed { basis, coef, lo, hi } => {
                let ap = basis.a_part(coef, x);
                let d = i.len();
                let obj = |a: &[f64], s: &mut Vec<f64>| ap.eval(a, s) + spec.f(x, a, y) * dt;
                let c_i = ap.eval(i, scratch);
                let mut best_v = c_i + spec.f(x, i, y) * dt;
                let mut best_a = i.to_vec();
                let offsets = &self.offsets;
                let mut a = i.to_vec();
                let mut try_dir = |dir: &[f64], best_v: &mut f64, best_a: &mut Vec<f64>, s: &mut Vec<f64>| {
                    for off in &offsets[1..] {
                        for j in 0..d {
                            a[j] = (i[j] + off * dir[j]).clamp(lo[j].min(i[j]), hi[j].max(i[j]));
                        }
                        let v = obj(&a, s);
                        if v < *best_v {
                            *best_v = v;
                            best_a.copy_from_slice(&a);
                        }
                    }
                };
                if d == 1 {
                    try_dir(&[1.0], &mut best_v, &mut best_a, scratch);
                } else {
                    for dir in self.directions(&ap, x, i, y, scratch) {
                        try_dir(&dir, &mut best_v, &mut best_a, scratch);
                    }
                }
                (best_v, best_a, c_i)
            }
        }
    }

    /// Search directions for `d > 1`: the coordinate axes and the numerical
    /// descent direction of the objective at `I_k`.
    fn directions(&self, ap: &APart, x: &[f64], i: &[f64], y: f64, scratch: &mut Vec<f64>) -> Vec<Vec<f64>> {
        let d = i.len();
        let h = 1e-4 * (1.0 + norm(i));
        let mut grad = vec![0.0; d];
        let mut a = i.to_vec();
        for j in 0..d {
            a[j] = i[j] + h;
            let up = ap.eval(&a, scratch) + self.spec.f(x, &a, y) * self.dt;
            a[j] = i[j] - h;
            let dn = ap.eval(&a, scratch) + self.spec.f(x, &a, y) * self.dt;
            a[j] = i[j];
            grad[j] = (up - dn) / (2.0 * h);
        }
        let mut dirs: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                e
            })
            .collect();
        let g = norm(&grad);
        if g > 0.0 && g.is_finite() {
            dirs.push(grad.iter().map(|v| -v / g).collect());
        }
        dirs
    }

    /// Picard sweeps of the ball search at `(x, i)` on step `k`.
    pub(crate) fn step_with(&self, model: &StepModel, x: &[f64], i: &[f64]) -> StepOutcome {
        let mut scratch = Vec::new();
        let sweeps = if self.spec.lipschitz_y() == 0.0 { 1 } else { self.picard_iters.max(1) };
        let mut y_in = f64::NAN;
        let mut prev = f64::NAN;
        let mut out = (f64::NAN, i.to_vec(), f64::NAN);
        let mut residuals = Vec::with_capacity(sweeps);
        for sweep in 0..sweeps {
            if sweep == 0 {
                // y_0 = C(I_k)
                let c_i = match model {
                    StepModel::Start { values, .. } => values[0],
                    StepModel::Regressed { basis, coef, .. } => basis.a_part(coef, x).eval(i, &mut scratch),
                };
                y_in = c_i;
                prev = c_i;
            } else {
                y_in = out.0;
            }
            out = self.search(model, x, i, y_in, &mut scratch);
            residuals.push((out.0 - prev).abs());
            prev = out.0;
        }
        let (y, a, c_i) = out;
        let dk = (c_i + self.spec.f(x, i, y_in) * self.dt - y).max(0.0);
        StepOutcome { y, a, dk, residuals }
    }

    pub(crate) fn step(&self, k: usize, x: &[f64], i: &[f64]) -> StepOutcome {
        let model = self.models[k].as_ref().expect("step model not fitted");
        self.step_with(model, x, i)
    }

    /// `Y_k` at `(x, i)`; `g(x)` past the last step.
    pub(crate) fn value(&self, k: usize, x: &[f64], i: &[f64]) -> f64 {
        if k >= self.models.len() {
            (self.spec.terminal)(x)
        } else {
            self.step(k, x, i).y
        }
    }

    /// Fitted `Y_k` at `(x, i)`, used to freeze the discount `γ`.
    pub fn value_hint(&self, k: usize, x: &[f64], i: &[f64]) -> f64 {
        self.value(k, x, i)
    }
}

impl TiltControl for FeedbackPolicy {
    fn drift(&self, k: usize, _t: f64, x: &[f64], i: &[f64], out: &mut [f64]) {
        let o = self.step(k, x, i);
        for j in 0..out.len() {
            out[j] = (o.a[j] - i[j]) / self.dt;
        }
        // guard the ball constraint against rounding
        let nn = norm(out);
        if nn > self.n {
            out.iter_mut().for_each(|v| *v *= self.n / nn);
        }
    }
}
