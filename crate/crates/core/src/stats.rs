//! Deterministic reductions and small statistical helpers.
//!
//! Parallel sums are computed over fixed-size chunks whose partial results are
//! combined in index order, so the answer does not depend on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const CHUNK: usize = 4096;

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined(&self, other: &Estimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// Sum in fixed chunks, combined in order.
pub fn det_sum(xs: &[f64]) -> f64 {
    let parts: Vec<f64> = xs.par_chunks(CHUNK).map(|c| c.iter().sum()).collect();
    parts.iter().sum()
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n == 0 {
        return Estimate { value: f64::NAN, stderr: f64::NAN };
    }
    let mean = det_sum(xs) / n as f64;
    if n == 1 {
        return Estimate::exact(mean);
    }
    let parts: Vec<f64> = xs
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|x| (x - mean) * (x - mean)).sum())
        .collect();
    let var = parts.iter().sum::<f64>() / (n - 1) as f64;
    Estimate { value: mean, stderr: (var / n as f64).sqrt() }
}

/// Empirical quantile by selection (nearest rank). `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty());
    let mut v: Vec<f64> = xs.to_vec();
    let k = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    let (_, x, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *x
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`.
pub fn golden_min(mut lo: f64, mut hi: f64, tol: f64, max_iter: usize, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - R * (hi - lo);
    let mut d = lo + R * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (hi - lo).abs() <= tol {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - R * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + R * (hi - lo);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
