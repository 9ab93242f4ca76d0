//! Least squares through the normal equations with a deterministic
//! parallel reduction and ridge fallback.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::stats::CHUNK;
use crate::{Error, Result};

/// Row-major design matrix over the active paths of one step.
pub struct Design {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl Design {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.a[r * self.cols..(r + 1) * self.cols]
    }

    pub fn predict(&self, r: usize, coef: &[f64]) -> f64 {
        self.row(r).iter().zip(coef).map(|(a, c)| a * c).sum()
    }
}

/// `AᵀA` summed chunk by chunk in a fixed order; zero entries are skipped,
/// which makes indicator bases cheap.
fn gram(design: &Design) -> Vec<f64> {
    let p = design.cols;
    let partial: Vec<Vec<f64>> = (0..design.rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut ata = vec![0.0; p * p];
            let mut nz = Vec::with_capacity(p);
            for r in c * CHUNK..((c + 1) * CHUNK).min(design.rows) {
                let row = design.row(r);
                nz.clear();
                nz.extend((0..p).filter(|&j| row[j] != 0.0));
                for (ii, &i) in nz.iter().enumerate() {
                    let ri = row[i];
                    for &j in &nz[ii..] {
                        ata[i * p + j] += ri * row[j];
                    }
                }
            }
            ata
        })
        .collect();
    let mut ata = vec![0.0; p * p];
    for a in partial {
        ata.iter_mut().zip(&a).for_each(|(s, v)| *s += v);
    }
    for i in 0..p {
        for j in 0..i {
            ata[i * p + j] = ata[j * p + i];
        }
    }
    ata
}

/// `Aᵀy`, same chunking as [`gram`].
fn project(design: &Design, y: &[f64]) -> Vec<f64> {
    let p = design.cols;
    let partial: Vec<Vec<f64>> = (0..design.rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut aty = vec![0.0; p];
            let rows = c * CHUNK..((c + 1) * CHUNK).min(design.rows);
            for (r, &yr) in rows.clone().zip(&y[rows]) {
                for (s, a) in aty.iter_mut().zip(design.row(r)) {
                    *s += a * yr;
                }
            }
            aty
        })
        .collect();
    let mut aty = vec![0.0; p];
    for a in partial {
        aty.iter_mut().zip(&a).for_each(|(s, v)| *s += v);
    }
    aty
}

/// Factorized normal equations of one design, reused across targets.
pub struct Solver {
    p: usize,
    live: Vec<usize>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    pub ridge: f64,
    pub escalated: bool,
}

impl Solver {
    /// Ridge-regularized factorization. Columns that are identically zero get
    /// coefficient zero. On failure the ridge is raised tenfold up to six
    /// times before giving up with the condition estimate.
    pub fn new(design: &Design, ridge: f64, step: usize) -> Result<Self> {
        let p = design.cols;
        let ata = gram(design);
        let trace: f64 = (0..p).map(|i| ata[i * p + i]).sum();
        let scale = if trace > 0.0 { trace / p as f64 } else { 1.0 };
        let live: Vec<usize> = (0..p).filter(|&i| ata[i * p + i] > 0.0).collect();
        let q = live.len();
        if q == 0 {
            return Ok(Self { p, live, chol: None, ridge, escalated: false });
        }
        let base = DMatrix::from_fn(q, q, |i, j| ata[live[i] * p + live[j]]);
        let mut lam = ridge;
        for attempt in 0..7 {
            let mut mat = base.clone();
            for i in 0..q {
                mat[(i, i)] += lam * scale;
            }
            if let Some(ch) = mat.cholesky() {
                if ch.l_dirty().iter().all(|v| v.is_finite()) {
                    if attempt > 0 {
                        log::warn!("step {step}: normal equations needed ridge {lam:e}");
                    }
                    return Ok(Self { p, live, chol: Some(ch), ridge: lam, escalated: attempt > 0 });
                }
            }
            lam = if lam > 0.0 { lam * 10.0 } else { 1e-12 };
        }
        let ev = base.symmetric_eigenvalues();
        let (mx, mn) = ev.iter().fold((0.0f64, f64::INFINITY), |(a, b), v| (a.max(v.abs()), b.min(v.abs())));
        Err(Error::IllConditioned { step, cond: mx / mn })
    }

    pub fn solve(&self, design: &Design, y: &[f64]) -> Vec<f64> {
        let mut coef = vec![0.0; self.p];
        if let Some(ch) = &self.chol {
            let aty = project(design, y);
            let rhs = nalgebra::DVector::from_iterator(self.live.len(), self.live.iter().map(|&i| aty[i]));
            let sol = ch.solve(&rhs);
            for (k, &i) in self.live.iter().enumerate() {
                coef[i] = sol[k];
            }
        }
        coef
    }
}
