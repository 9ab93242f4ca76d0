use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;

use crate::{Error, Result};

/// `u(t, x) = -(1/2λ) log E[exp(-2λ g(x + W_{T-t}))]` for the equation with
/// `F = λ|z|²`, `σ = ϱ = I`, `b = 0`. Tensor Gauss-Hermite in `d` dimensions,
/// summed in log space.
///
/// Fails with [`Error::Underflow`] when the exponents spread over more than
/// the `f64` range, where a single node would dominate the rule.
pub fn cole_hopf_kpz(lambda: f64, g: &dyn Fn(&[f64]) -> f64, horizon: f64, t: f64, x: &[f64], quad_points: usize) -> Result<f64> {
    if !(lambda > 0.0) || !(t <= horizon) || x.is_empty() {
        return Err(Error::InvalidArgument(format!("need lambda > 0, t <= T and d >= 1 (lambda {lambda}, t {t}, T {horizon})")));
    }
    if t == horizon {
        return Ok(g(x));
    }
    let n = NonZeroUsize::new(quad_points).ok_or_else(|| Error::InvalidArgument("quad_points must be positive".into()))?;
    let rule = GaussHermite::new(n);
    let nodes = rule.as_node_weight_pairs();
    let d = x.len();
    let scale = (2.0 * (horizon - t)).sqrt();
    let log_norm = -0.5 * d as f64 * std::f64::consts::PI.ln();
    let total = nodes.len().pow(d as u32);
    let mut terms = Vec::with_capacity(total);
    let (mut e_lo, mut e_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut pt = vec![0.0; d];
    for idx in 0..total {
        let mut r = idx;
        let mut lw = log_norm;
        for j in 0..d {
            let (s, w) = nodes[r % nodes.len()];
            r /= nodes.len();
            pt[j] = x[j] + scale * s;
            lw += w.ln();
        }
        let e = -2.0 * lambda * g(&pt);
        e_lo = e_lo.min(e);
        e_hi = e_hi.max(e);
        terms.push(lw + e);
    }
    // beyond ~700 in either direction exp() leaves the f64 range
    if !e_lo.is_finite() || !e_hi.is_finite() || e_hi - e_lo > 1400.0 {
        return Err(Error::Underflow { exponent: if e_hi.abs() > e_lo.abs() { e_hi } else { e_lo } });
    }
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(-lse / (2.0 * lambda))
}
