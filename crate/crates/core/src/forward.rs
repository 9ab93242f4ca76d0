//! Euler-Maruyama simulation of the randomized forward system
//!
//! ```text
//! dX = (b(X) + ϱ(X) I) ds + σ(X) dW,    dI = dB   (+ ν ds under a tilt)
//! ```
//!
//! Every path owns a ChaCha8 stream keyed by `(seed, path)`, so bundles are
//! bit-identical whatever the thread count. A tilt `ν` is applied at the start
//! of a step: `Ĩ_k = I_k + ν_k dt` drives `X` over `[t_k, t_{k+1}]`, then
//! `I_{k+1} = Ĩ_k + dB_k`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::ProblemSpec;
use crate::stats::{mean_stderr, norm, Estimate};
use crate::{Error, Result};

/// Paths with `|X| > BLOWUP` are flagged.
pub const BLOWUP: f64 = 1e12;
/// Largest tolerated fraction of flagged paths.
pub const BLOWUP_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_start < t_end) || steps == 0 || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidArgument(format!("bad time grid [{t_start}, {t_end}] with {steps} steps")));
        }
        Ok(Self { t_start, t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt()
    }

    fn check_within(&self, horizon: f64) -> Result<()> {
        if self.t_start < 0.0 || self.t_end > horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!("grid [{}, {}] outside [0, {horizon}]", self.t_start, self.t_end)));
        }
        Ok(())
    }
}

/// Drift `ν` added to the `I`-equation.
pub trait TiltControl: Sync {
    fn drift(&self, k: usize, t: f64, x: &[f64], i: &[f64], out: &mut [f64]);
}

impl<F> TiltControl for F
where
    F: Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Sync,
{
    fn drift(&self, k: usize, t: f64, x: &[f64], i: &[f64], out: &mut [f64]) {
        self(k, t, x, i, out)
    }
}

/// Monte Carlo settings shared by the simulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Pair path `2j+1` with path `2j` by negating all increments.
    pub antithetic: bool,
}

impl SimOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, seed, antithetic: false }
    }
}

/// Simulated trajectories. Arrays are path-major:
/// `x[(p * (steps + 1) + k) * d + j]`, `dw[(p * steps + k) * d + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n_paths: usize,
    pub dim: usize,
    pub grid: TimeGrid,
    pub x: Vec<f64>,
    pub i: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    /// Applied tilt `ν_k`, present for tilted bundles.
    pub tilt: Option<Vec<f64>>,
    pub seed: u64,
    pub antithetic: bool,
    pub x0: Vec<f64>,
    pub a0: Vec<f64>,
    /// Paths that crossed [`BLOWUP`]; frozen afterwards and ignored downstream.
    pub flagged: Vec<usize>,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    fn node(&self, p: usize, k: usize) -> std::ops::Range<usize> {
        let o = (p * (self.grid.steps + 1) + k) * self.dim;
        o..o + self.dim
    }

    fn inc(&self, p: usize, k: usize) -> std::ops::Range<usize> {
        let o = (p * self.grid.steps + k) * self.dim;
        o..o + self.dim
    }

    pub fn x_at(&self, p: usize, k: usize) -> &[f64] {
        &self.x[self.node(p, k)]
    }

    pub fn i_at(&self, p: usize, k: usize) -> &[f64] {
        &self.i[self.node(p, k)]
    }

    pub fn dw_at(&self, p: usize, k: usize) -> &[f64] {
        &self.dw[self.inc(p, k)]
    }

    pub fn db_at(&self, p: usize, k: usize) -> &[f64] {
        &self.db[self.inc(p, k)]
    }

    pub fn tilt_at(&self, p: usize, k: usize) -> Option<&[f64]> {
        let r = self.inc(p, k);
        self.tilt.as_ref().map(|t| &t[r])
    }

    /// `I_k + ν_k dt`, the control in force over step `k`.
    pub fn effective_i(&self, p: usize, k: usize, out: &mut [f64]) {
        out.copy_from_slice(self.i_at(p, k));
        if let Some(nu) = self.tilt_at(p, k) {
            let dt = self.grid.dt();
            for (o, v) in out.iter_mut().zip(nu) {
                *o += v * dt;
            }
        }
    }

    /// Mask of usable paths.
    pub fn active(&self) -> Vec<bool> {
        let mut m = vec![true; self.n_paths];
        for &p in &self.flagged {
            m[p] = false;
        }
        m
    }

    const MAGIC: &'static [u8; 8] = b"VHJPATH\0";
    const VERSION: u32 = 1;

    /// Binary dump: magic, version, dims, seed and start state, then the
    /// arrays `x, i, dw, db[, tilt]` as little-endian `f64`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        for v in [self.dim as u64, self.grid.steps as u64, self.n_paths as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.antithetic as u8, self.tilt.is_some() as u8])?;
        let mut floats = vec![self.grid.t_start, self.grid.t_end];
        floats.extend(&self.x0);
        floats.extend(&self.a0);
        for v in floats {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.flagged.len() as u64).to_le_bytes())?;
        for &p in &self.flagged {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for arr in [&self.x, &self.i, &self.dw, &self.db].into_iter().chain(self.tilt.as_ref()) {
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("path dump: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let mut u64s = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let (dim, steps, n_paths, seed) = (u64s()? as usize, u64s()? as usize, u64s()? as usize, u64s()?);
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let mut f64s = |n: usize| -> Result<Vec<f64>> {
            let mut out = vec![0.0; n];
            let mut b = [0u8; 8];
            for v in out.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            Ok(out)
        };
        let head = f64s(2 + 2 * dim)?;
        let grid = TimeGrid::new(head[0], head[1], steps)?;
        let x0 = head[2..2 + dim].to_vec();
        let a0 = head[2 + dim..].to_vec();
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let nflag = u64::from_le_bytes(b) as usize;
        let mut flagged = Vec::with_capacity(nflag);
        for _ in 0..nflag {
            r.read_exact(&mut b)?;
            flagged.push(u64::from_le_bytes(b) as usize);
        }
        let nodes = n_paths * (steps + 1) * dim;
        let incs = n_paths * steps * dim;
        let mut f64s = |n: usize| -> Result<Vec<f64>> {
            let mut out = vec![0.0; n];
            for v in out.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            Ok(out)
        };
        let x = f64s(nodes)?;
        let i = f64s(nodes)?;
        let dw = f64s(incs)?;
        let db = f64s(incs)?;
        let tilt = if flags[1] == 1 { Some(f64s(incs)?) } else { None };
        Ok(Self { n_paths, dim, grid, x, i, dw, db, tilt, seed, antithetic: flags[0] == 1, x0, a0, flagged })
    }
}

/// State handed to a [`PathVisitor`] for one Euler step.
pub struct StepView<'a> {
    pub k: usize,
    pub x: &'a [f64],
    pub i: &'a [f64],
    /// `I_k + ν_k dt`
    pub i_eff: &'a [f64],
    pub nu: &'a [f64],
    pub dw: &'a [f64],
    pub db: &'a [f64],
    pub x_next: &'a [f64],
    pub i_next: &'a [f64],
}

pub trait PathVisitor {
    fn step(&mut self, s: &StepView<'_>);
}

pub(crate) struct Tilt<'a> {
    pub control: &'a dyn TiltControl,
    pub bound: f64,
}

/// Path `p`'s RNG. Antithetic pairs share a stream.
fn path_rng(seed: u64, p: usize, antithetic: bool) -> (ChaCha8Rng, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stream, sign) = if antithetic { ((p / 2) as u64, if p % 2 == 1 { -1.0 } else { 1.0 }) } else { (p as u64, 1.0) };
    rng.set_stream(stream);
    (rng, sign)
}

/// Runs one path, calling `visit` after each step. Returns `true` if the
/// path crossed the blow-up threshold (it is then frozen).
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_path(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    a0: &[f64],
    p: usize,
    opts: &SimOptions,
    tilt: Option<&Tilt<'_>>,
    visit: &mut impl PathVisitor,
) -> Result<bool> {
    let d = spec.dim;
    let dt = grid.dt();
    let sq = dt.sqrt();
    let (mut rng, sign) = path_rng(opts.seed, p, opts.antithetic);
    let mut x = x0.to_vec();
    let mut i = a0.to_vec();
    let mut x_next = vec![0.0; d];
    let mut i_next = vec![0.0; d];
    let mut i_eff = vec![0.0; d];
    let mut nu = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut blown = false;
    for k in 0..grid.steps {
        for v in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sign * z * sq;
        }
        for v in db.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sign * z * sq;
        }
        i_eff.copy_from_slice(&i);
        if let Some(t) = tilt {
            t.control.drift(k, grid.time(k), &x, &i, &mut nu);
            let nn = norm(&nu);
            if !(nn <= t.bound * (1.0 + 1e-12)) {
                return Err(Error::TiltBound { step: k, path: p, norm: nn, bound: t.bound });
            }
            for (e, v) in i_eff.iter_mut().zip(&nu) {
                *e += v * dt;
            }
        }
        if blown {
            x_next.copy_from_slice(&x);
        } else {
            let b = (spec.drift)(&x);
            let s = (spec.sigma)(&x);
            let r = (spec.rho)(&x);
            for j in 0..d {
                let mut drift = b[j];
                let mut diff = 0.0;
                for l in 0..d {
                    drift += r[j * d + l] * i_eff[l];
                    diff += s[j * d + l] * dw[l];
                }
                x_next[j] = x[j] + drift * dt + diff;
            }
            if x_next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                blown = true;
                x_next.copy_from_slice(&x);
            }
        }
        for j in 0..d {
            i_next[j] = i_eff[j] + db[j];
        }
        visit.step(&StepView { k, x: &x, i: &i, i_eff: &i_eff, nu: &nu, dw: &dw, db: &db, x_next: &x_next, i_next: &i_next });
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut i, &mut i_next);
    }
    Ok(blown)
}

fn check_inputs(spec: &ProblemSpec, grid: &TimeGrid, x: &[f64], a: &[f64], n_paths: usize) -> Result<()> {
    spec.check_structure()?;
    grid.check_within(spec.horizon)?;
    if x.len() != spec.dim || a.len() != spec.dim {
        return Err(Error::Structural(format!("start state must have dimension {}", spec.dim)));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    Ok(())
}

pub(crate) fn check_blowup(flagged: usize, n_paths: usize) -> Result<()> {
    if flagged as f64 > BLOWUP_FRACTION * n_paths as f64 {
        return Err(Error::BlowUp { flagged, n_paths });
    }
    if flagged > 0 {
        log::warn!("{flagged} of {n_paths} paths exceeded |X| > {BLOWUP:e}; excluded");
    }
    Ok(())
}

struct Recorder<'a> {
    d: usize,
    x: &'a mut [f64],
    i: &'a mut [f64],
    dw: &'a mut [f64],
    db: &'a mut [f64],
    tilt: Option<&'a mut [f64]>,
}

impl PathVisitor for Recorder<'_> {
    fn step(&mut self, s: &StepView<'_>) {
        let d = self.d;
        let (n1, n0) = ((s.k + 1) * d, s.k * d);
        self.x[n1..n1 + d].copy_from_slice(s.x_next);
        self.i[n1..n1 + d].copy_from_slice(s.i_next);
        self.dw[n0..n0 + d].copy_from_slice(s.dw);
        self.db[n0..n0 + d].copy_from_slice(s.db);
        if let Some(t) = self.tilt.as_deref_mut() {
            t[n0..n0 + d].copy_from_slice(s.nu);
        }
    }
}

pub(crate) fn simulate_impl(spec: &ProblemSpec, grid: &TimeGrid, x: &[f64], a: &[f64], opts: &SimOptions, tilt: Option<&Tilt<'_>>) -> Result<PathBundle> {
    check_inputs(spec, grid, x, a, opts.n_paths)?;
    let d = spec.dim;
    let k1 = grid.steps + 1;
    let n = opts.n_paths;
    let mut xs = vec![0.0; n * k1 * d];
    let mut is = vec![0.0; n * k1 * d];
    let mut dws = vec![0.0; n * grid.steps * d];
    let mut dbs = vec![0.0; n * grid.steps * d];
    let mut tilts = tilt.map(|_| vec![0.0; n * grid.steps * d]);
    let inc = grid.steps * d;
    let results: Vec<Result<bool>> = {
        let mut tilt_chunks: Vec<Option<&mut [f64]>> = match tilts.as_mut() {
            Some(t) => t.chunks_mut(inc).map(Some).collect(),
            None => (0..n).map(|_| None).collect(),
        };
        xs.par_chunks_mut(k1 * d)
            .zip(is.par_chunks_mut(k1 * d))
            .zip(dws.par_chunks_mut(inc))
            .zip(dbs.par_chunks_mut(inc))
            .zip(tilt_chunks.par_iter_mut())
            .enumerate()
            .map(|(p, ((((xp, ip), dwp), dbp), tp))| {
                xp[..d].copy_from_slice(x);
                ip[..d].copy_from_slice(a);
                let mut rec = Recorder { d, x: xp, i: ip, dw: dwp, db: dbp, tilt: tp.as_deref_mut() };
                run_path(spec, grid, x, a, p, opts, tilt, &mut rec)
            })
            .collect()
    };
    let mut flagged = Vec::new();
    for (p, r) in results.into_iter().enumerate() {
        if r? {
            flagged.push(p);
        }
    }
    check_blowup(flagged.len(), n)?;
    Ok(PathBundle {
        n_paths: n,
        dim: d,
        grid: *grid,
        x: xs,
        i: is,
        dw: dws,
        db: dbs,
        tilt: tilts,
        seed: opts.seed,
        antithetic: opts.antithetic,
        x0: x.to_vec(),
        a0: a.to_vec(),
        flagged,
    })
}

/// Euler-Maruyama for `X`, exact Gaussian increments for `I`.
pub fn simulate(spec: &ProblemSpec, grid: &TimeGrid, x: &[f64], a: &[f64], n_paths: usize, seed: u64) -> Result<PathBundle> {
    simulate_impl(spec, grid, x, a, &SimOptions::new(n_paths, seed), None)
}

/// As [`simulate`] with explicit options (antithetic pairing).
pub fn simulate_with(spec: &ProblemSpec, grid: &TimeGrid, x: &[f64], a: &[f64], opts: &SimOptions) -> Result<PathBundle> {
    simulate_impl(spec, grid, x, a, opts, None)
}

/// Simulation under `P^ν`: the `I`-equation gains the drift `ν`, which must
/// satisfy `|ν| <= n_bound` at every step.
#[allow(clippy::too_many_arguments)]
pub fn simulate_tilted(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x: &[f64],
    a: &[f64],
    opts: &SimOptions,
    nu: &dyn TiltControl,
    n_bound: f64,
) -> Result<PathBundle> {
    simulate_impl(spec, grid, x, a, opts, Some(&Tilt { control: nu, bound: n_bound }))
}

/// Empirical moments of the forward system against the a-priori bound
/// `E sup|X|^m <= C (1 + |x0|^m + ∫ E|I|^e)` (an exponential form when
/// `p_ϱ = 1`), evaluated at `s = t_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub m: f64,
    /// `E sup_k |X_k|^m`
    pub sup_moment: Estimate,
    /// `∫ E|I_r|^e dr` with `e = m/(1-p_ϱ)`, or `e = 2m` when `p_ϱ = 1`.
    pub i_moment: f64,
    /// Smallest constant making the bound hold.
    pub fitted_c: f64,
    pub pass: bool,
}

pub fn moment_diagnostics(bundle: &PathBundle, spec: &ProblemSpec, m: f64) -> Result<MomentReport> {
    if m < 1.0 {
        return Err(Error::InvalidArgument("moment order must be >= 1".into()));
    }
    if bundle.x.iter().chain(&bundle.i).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("bundle contains non-finite values".into()));
    }
    let active = bundle.active();
    let steps = bundle.steps();
    let dt = bundle.grid.dt();
    let p_rho = spec.growth.p_rho;
    let e = if p_rho < 1.0 { m / (1.0 - p_rho) } else { 2.0 * m };
    let paths: Vec<usize> = (0..bundle.n_paths).filter(|&p| active[p]).collect();

    let sups: Vec<f64> = paths
        .par_iter()
        .map(|&p| (0..=steps).map(|k| norm(bundle.x_at(p, k)).powf(m)).fold(0.0, f64::max))
        .collect();
    let sup_moment = mean_stderr(&sups);
    let i_moment: f64 = (0..steps)
        .map(|k| {
            let v: Vec<f64> = paths.iter().map(|&p| norm(bundle.i_at(p, k)).powf(e)).collect();
            mean_stderr(&v).value * dt
        })
        .sum();
    let base = 1.0 + norm(&bundle.x0).powf(m);
    let fitted_c = if p_rho < 1.0 {
        sup_moment.value / (base + i_moment)
    } else {
        let int_abs: Vec<f64> = paths.iter().map(|&p| (0..steps).map(|k| norm(bundle.i_at(p, k))).sum::<f64>() * dt).collect();
        let rhs = |c: f64| {
            let ex: Vec<f64> = int_abs.iter().map(|v| (c * v).exp()).collect();
            c * (base + i_moment.sqrt()) * mean_stderr(&ex).value.sqrt()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while rhs(hi) < sup_moment.value && hi < 1e6 {
            hi *= 2.0;
        }
        if rhs(hi) < sup_moment.value || !rhs(hi).is_finite() {
            f64::INFINITY
        } else {
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if rhs(mid) >= sup_moment.value {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    };
    Ok(MomentReport { m, sup_moment, i_moment, fitted_c, pass: fitted_c.is_finite() })
}
