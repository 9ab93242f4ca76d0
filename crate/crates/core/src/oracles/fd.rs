use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::ProblemSpec;
use crate::stats::golden_min;
use crate::{Error, Result};

/// Explicit finite-difference grid for `d = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FDGrid1D {
    /// Reporting window.
    pub x_min: f64,
    pub x_max: f64,
    /// Nodes in the window.
    pub nx: usize,
    /// Width added on each side, same spacing.
    pub pad: f64,
    /// Controls searched in `[-a_max, a_max]`.
    pub a_max: f64,
    pub na: usize,
    pub nt: usize,
    pub t_start: f64,
    /// Keep every this many time levels (the endpoints are always kept).
    pub save_every: Option<usize>,
}

impl FDGrid1D {
    pub fn new(x_min: f64, x_max: f64, nx: usize, nt: usize) -> Self {
        Self { x_min, x_max, nx, pad: 4.0, a_max: 10.0, na: 81, nt, t_start: 0.0, save_every: None }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    fn n_pad(&self) -> usize {
        (self.pad / self.dx()).ceil() as usize
    }

    fn check(&self) -> Result<()> {
        if self.nx < 3 || !(self.x_max > self.x_min) || self.na < 2 || self.nt == 0 || !(self.a_max >= 0.0) || !(self.pad >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad FD grid {self:?}")));
        }
        Ok(())
    }
}

/// Grid function on the reporting window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSolution {
    pub x: Vec<f64>,
    /// Saved time levels, increasing; the first is `t_start`, the last `T`.
    pub times: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub dt: f64,
    pub nt: usize,
    pub a_max: f64,
    /// Largest `|a*|` selected on the window at `t_start`.
    pub max_control: f64,
}

impl FdSolution {
    /// Values at `t_start`.
    pub fn start(&self) -> &[f64] {
        &self.u[0]
    }

    /// Linear interpolation at `t_start`.
    pub fn value_at(&self, x: f64) -> f64 {
        let dx = self.x[1] - self.x[0];
        let u = ((x - self.x[0]) / dx).clamp(0.0, (self.x.len() - 1) as f64);
        let i = (u.floor() as usize).min(self.x.len() - 2);
        let w = u - i as f64;
        (1.0 - w) * self.u[0][i] + w * self.u[0][i + 1]
    }

    /// `t,x,u` rows for every saved level.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t,x,u")?;
        for (t, row) in self.times.iter().zip(&self.u) {
            for (x, u) in self.x.iter().zip(row) {
                writeln!(w, "{t},{x},{u}")?;
            }
        }
        Ok(())
    }
}

struct Coefs {
    x: Vec<f64>,
    b: Vec<f64>,
    s2: Vec<f64>,
    rho: Vec<f64>,
}

fn coefs(spec: &ProblemSpec, fd: &FDGrid1D) -> Coefs {
    let dx = fd.dx();
    let np = fd.n_pad();
    let n = fd.nx + 2 * np;
    let x: Vec<f64> = (0..n).map(|j| fd.x_min + (j as f64 - np as f64) * dx).collect();
    let b = x.iter().map(|v| (spec.drift)(&[*v])[0]).collect();
    let s2 = x.iter().map(|v| (spec.sigma)(&[*v])[0].powi(2)).collect();
    let rho = x.iter().map(|v| (spec.rho)(&[*v])[0]).collect();
    Coefs { x, b, s2, rho }
}

fn required_nt(c: &Coefs, fd: &FDGrid1D, span: f64) -> usize {
    let dx = fd.dx();
    let rate = c
        .s2
        .iter()
        .zip(c.b.iter().zip(&c.rho))
        .map(|(s2, (b, r))| s2 / (dx * dx) + (b.abs() + r.abs() * fd.a_max) / dx)
        .fold(0.0, f64::max);
    (span * rate / 0.5).ceil().max(1.0) as usize
}

/// Minimizes `h` over the control grid, then polishes between the best
/// point's neighbours. Returns `(argmin, min)`.
fn inf_over(a_max: f64, na: usize, h: impl Fn(f64) -> f64) -> (f64, f64) {
    let step = 2.0 * a_max / (na - 1) as f64;
    let mut best = (0.0, h(0.0));
    for j in 0..na {
        let a = -a_max + j as f64 * step;
        let v = h(a);
        if v < best.1 {
            best = (a, v);
        }
    }
    if a_max == 0.0 {
        return best;
    }
    let lo = (best.0 - step).max(-a_max);
    let hi = (best.0 + step).min(a_max);
    let polished = golden_min(lo, hi, 1e-11 * (1.0 + a_max), 80, &h);
    if polished.1 < best.1 {
        polished
    } else {
        best
    }
}

/// Explicit scheme for `-u_t - inf_a [(b + ϱa)u_x + σ²u_xx/2 + f(x, a, u)] = 0`.
///
/// First derivatives are central where `|b + ϱa| dx <= σ²` and upwind
/// otherwise, which keeps every stencil weight nonnegative. Boundary nodes
/// follow `u_t = -inf_a f(x_b, a, u)`; the padding keeps their error away
/// from the window.
pub fn fd_hjb_1d(spec: &ProblemSpec, fd: &FDGrid1D) -> Result<FdSolution> {
    fd.check()?;
    if spec.dim != 1 {
        return Err(Error::InvalidArgument("the finite-difference oracle is one-dimensional".into()));
    }
    let span = spec.horizon - fd.t_start;
    if !(span > 0.0) {
        return Err(Error::InvalidArgument(format!("t_start {} must lie before T = {}", fd.t_start, spec.horizon)));
    }
    let c = coefs(spec, fd);
    let need = required_nt(&c, fd, span);
    if fd.nt < need {
        return Err(Error::Cfl { suggested_nt: need });
    }
    let dx = fd.dx();
    let dt = span / fd.nt as f64;
    let n = c.x.len();
    let np = fd.n_pad();
    let window = np..np + fd.nx;
    let save_every = fd.save_every.unwrap_or(fd.nt).max(1);

    let mut u: Vec<f64> = c.x.iter().map(|x| (spec.terminal)(&[*x])).collect();
    let mut saved = vec![(spec.horizon, u[window.clone()].to_vec())];
    let mut controls = vec![0.0; n];
    for k in (0..fd.nt).rev() {
        let prev = &u;
        let next: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = [c.x[i]];
                if i == 0 || i == n - 1 {
                    let (a, v) = inf_over(fd.a_max, fd.na, |a| spec.f(&x, &[a], prev[i]));
                    return (prev[i] + dt * v, a);
                }
                let (um, u0, up) = (prev[i - 1], prev[i], prev[i + 1]);
                let s2 = c.s2[i];
                let d2 = (up - 2.0 * u0 + um) / (dx * dx);
                let (dc, df, db) = ((up - um) / (2.0 * dx), (up - u0) / dx, (u0 - um) / dx);
                let ham = |a: f64| {
                    let drift = c.b[i] + c.rho[i] * a;
                    let d1 = if drift.abs() * dx <= s2 {
                        dc
                    } else if drift > 0.0 {
                        df
                    } else {
                        db
                    };
                    drift * d1 + spec.f(&x, &[a], u0)
                };
                let (a, v) = inf_over(fd.a_max, fd.na, ham);
                (u0 + dt * (0.5 * s2 * d2 + v), a)
            })
            .collect();
        for (j, (v, a)) in next.into_iter().enumerate() {
            u[j] = v;
            controls[j] = a;
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("finite-difference solution became non-finite at step {k}")));
        }
        if k % save_every == 0 {
            saved.push((fd.t_start + k as f64 * dt, u[window.clone()].to_vec()));
        }
    }
    saved.reverse();
    let max_control = controls[window.clone()].iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let (times, u) = saved.into_iter().unzip();
    Ok(FdSolution { x: c.x[window].to_vec(), times, u, dt, nt: fd.nt, a_max: fd.a_max, max_control })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub solution: FdSolution,
    /// `(a_max, max change at t_start against the previous a_max)`
    pub history: Vec<(f64, f64)>,
    pub saturated: bool,
}

/// Doubles `a_max` until the window values at `t_start` move by less than
/// `tol`. `nt` is raised only if the CFL bound requires it, and then the
/// previous range is re-run at the new `nt` before comparing.
pub fn fd_hjb_1d_saturated(spec: &ProblemSpec, fd: &FDGrid1D, tol: f64, max_doublings: usize) -> Result<Saturation> {
    let run = |g: &FDGrid1D| -> Result<FdSolution> {
        match fd_hjb_1d(spec, g) {
            Err(Error::Cfl { suggested_nt }) => fd_hjb_1d(spec, &FDGrid1D { nt: suggested_nt, ..g.clone() }),
            r => r,
        }
    };
    let mut grid = fd.clone();
    let mut prev = run(&grid)?;
    let mut history = Vec::new();
    for _ in 0..max_doublings {
        grid.a_max *= 2.0;
        grid.nt = grid.nt.max(prev.nt);
        let cur = run(&grid)?;
        if cur.nt != prev.nt {
            // compare at a common time step, so only the control range differs
            prev = run(&FDGrid1D { a_max: grid.a_max / 2.0, nt: cur.nt, ..grid.clone() })?;
        }
        let change = cur.start().iter().zip(prev.start()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        history.push((grid.a_max, change));
        prev = cur;
        if change < tol {
            return Ok(Saturation { solution: prev, history, saturated: true });
        }
    }
    Ok(Saturation { solution: prev, history, saturated: false })
}
