//! Regression bases on standardized `(X_k, I_k)`.

use serde::{Deserialize, Serialize};

/// Which functions of `(x, a)` span the conditional expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BasisKind {
    /// Hermite products with x-degree up to `x_degree` and a-degree up to
    /// `a_degree`; a term of a-degree `q > 0` keeps x-degree at most
    /// `max(x_degree - 2q, 1)`.
    Structured { x_degree: usize, a_degree: usize },
    /// All Hermite products of total degree `<= degree` in the `2d` variables.
    TotalDegree { degree: usize },
    /// Indicators of a hypercube partition of `[-CELL_SPAN, CELL_SPAN]^{2d}`
    /// (standardized units), outer cells unbounded.
    PiecewiseConstant { resolution: usize },
}

impl Default for BasisKind {
    fn default() -> Self {
        BasisKind::Structured { x_degree: 6, a_degree: 2 }
    }
}

impl BasisKind {
    pub fn check(&self) -> crate::Result<()> {
        let ok = match *self {
            BasisKind::Structured { x_degree, a_degree } => x_degree >= 1 && a_degree >= 1,
            BasisKind::TotalDegree { degree } => degree >= 1,
            BasisKind::PiecewiseConstant { resolution } => resolution >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(crate::Error::InvalidArgument(format!("basis {self:?}: degree must be >= 1, resolution >= 2")))
        }
    }
}

const CELL_SPAN: f64 = 2.5;

/// Multi-indices of length `d` with sum `<= m`.
fn multi_indices(d: usize, m: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = vec![0u8; d];
    fn rec(pos: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[pos] = e as u8;
            rec(pos + 1, left - e, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, m, &mut cur, &mut out);
    out.sort_by_key(|v| v.iter().map(|&e| e as usize).sum::<usize>());
    out
}

fn degree(v: &[u8]) -> usize {
    v.iter().map(|&e| e as usize).sum()
}

/// Normalized probabilists' Hermite values `He_n(t)/sqrt(n!)` for `n <= m`.
#[inline]
pub(crate) fn hermite(t: f64, m: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if m == 0 {
        return;
    }
    out[1] = t;
    // He_{n+1} = t He_n - n He_{n-1}; with h_n = He_n/sqrt(n!)
    for n in 1..m {
        let nf = n as f64;
        out[n + 1] = (t * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
    }
}

fn stack_or_heap<'a>(stack: &'a mut [f64; 32], heap: &'a mut Vec<f64>, len: usize) -> &'a mut [f64] {
    if len <= stack.len() {
        &mut stack[..len]
    } else {
        heap.resize(len, 0.0);
        &mut heap[..len]
    }
}

/// `(beta, [(alpha, column)])`
type TermGroup = (Vec<u8>, Vec<(Vec<u8>, usize)>);

/// The basis fitted to one time step: standardization plus the retained terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBasis {
    kind: BasisKind,
    d: usize,
    x_shift: Vec<f64>,
    x_scale: Vec<f64>,
    i_shift: Vec<f64>,
    i_scale: Vec<f64>,
    x_active: Vec<bool>,
    i_active: Vec<bool>,
    /// Polynomial terms `(alpha, beta)`: exponents on x and on a.
    terms: Vec<(Vec<u8>, Vec<u8>)>,
    /// Terms grouped by `beta`: `(beta, [(alpha, column)])`.
    groups: Vec<TermGroup>,
    max_x: usize,
    max_a: usize,
}

impl StepBasis {
    /// `mean`/`std` are per coordinate, x first then i.
    pub fn fit(kind: &BasisKind, d: usize, x_mean: &[f64], x_std: &[f64], i_mean: &[f64], i_std: &[f64]) -> Self {
        let active = |m: &[f64], s: &[f64]| -> Vec<bool> { m.iter().zip(s).map(|(m, s)| *s > 1e-10 * (1.0 + m.abs())).collect() };
        let x_active = active(x_mean, x_std);
        let i_active = active(i_mean, i_std);
        let scale = |s: &[f64], act: &[bool]| -> Vec<f64> { s.iter().zip(act).map(|(s, a)| if *a { *s } else { 1.0 }).collect() };
        let mut terms = Vec::new();
        let uses_inactive = |v: &[u8], act: &[bool]| v.iter().zip(act).any(|(e, a)| *e > 0 && !a);
        match *kind {
            BasisKind::Structured { x_degree, a_degree } => {
                for beta in multi_indices(d, a_degree) {
                    let q = degree(&beta);
                    let cap = if q == 0 { x_degree } else { x_degree.saturating_sub(2 * q).max(1) };
                    for alpha in multi_indices(d, cap) {
                        terms.push((alpha, beta.clone()));
                    }
                }
            }
            BasisKind::TotalDegree { degree: m } => {
                for beta in multi_indices(d, m) {
                    for alpha in multi_indices(d, m - degree(&beta)) {
                        terms.push((alpha, beta.clone()));
                    }
                }
            }
            BasisKind::PiecewiseConstant { .. } => {}
        }
        terms.retain(|(a, b)| !uses_inactive(a, &x_active) && !uses_inactive(b, &i_active));
        let mut groups: Vec<TermGroup> = Vec::new();
        for (col, (alpha, beta)) in terms.iter().enumerate() {
            match groups.iter_mut().find(|(b, _)| b == beta) {
                Some((_, g)) => g.push((alpha.clone(), col)),
                None => groups.push((beta.clone(), vec![(alpha.clone(), col)])),
            }
        }
        let max_x = terms.iter().flat_map(|(a, _)| a.iter()).copied().max().unwrap_or(0) as usize;
        let max_a = terms.iter().flat_map(|(_, b)| b.iter()).copied().max().unwrap_or(0) as usize;
        Self {
            kind: kind.clone(),
            d,
            x_shift: x_mean.to_vec(),
            x_scale: scale(x_std, &x_active),
            i_shift: i_mean.to_vec(),
            i_scale: scale(i_std, &i_active),
            x_active,
            i_active,
            terms,
            groups,
            max_x,
            max_a,
        }
    }

    pub fn len(&self) -> usize {
        match self.kind {
            BasisKind::PiecewiseConstant { resolution } => self.x_cells(resolution) * self.a_cells(resolution),
            _ => self.terms.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every I-coordinate is constant across paths (the start step).
    pub fn a_degenerate(&self) -> bool {
        self.i_active.iter().all(|a| !a)
    }

    fn x_cells(&self, r: usize) -> usize {
        r.pow(self.x_active.iter().filter(|a| **a).count() as u32)
    }

    fn a_cells(&self, r: usize) -> usize {
        r.pow(self.i_active.iter().filter(|a| **a).count() as u32)
    }

    fn cell(t: f64, r: usize) -> usize {
        let u = (t + CELL_SPAN) / (2.0 * CELL_SPAN) * r as f64;
        (u.floor().max(0.0) as usize).min(r - 1)
    }

    fn cell_index(v: &[f64], shift: &[f64], scale: &[f64], act: &[bool], r: usize) -> usize {
        let mut idx = 0;
        for j in 0..v.len() {
            if act[j] {
                idx = idx * r + Self::cell((v[j] - shift[j]) / scale[j], r);
            }
        }
        idx
    }

    fn hermite_table(&self, v: &[f64], shift: &[f64], scale: &[f64], m: usize, out: &mut [f64]) {
        for j in 0..self.d {
            hermite((v[j] - shift[j]) / scale[j], m, &mut out[j * (m + 1)..(j + 1) * (m + 1)]);
        }
    }

    /// Writes the feature row of `(x, a)` into `out` (length [`Self::len`]).
    pub fn features(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        if let BasisKind::PiecewiseConstant { resolution: r } = self.kind {
            out.iter_mut().for_each(|v| *v = 0.0);
            let xc = Self::cell_index(x, &self.x_shift, &self.x_scale, &self.x_active, r);
            let ac = Self::cell_index(a, &self.i_shift, &self.i_scale, &self.i_active, r);
            out[xc * self.a_cells(r) + ac] = 1.0;
            return;
        }
        let (mx, ma) = (self.max_x, self.max_a);
        let (mut sx, mut sa) = ([0.0; 32], [0.0; 32]);
        let (mut vx, mut va) = (Vec::new(), Vec::new());
        let hx = stack_or_heap(&mut sx, &mut vx, self.d * (mx + 1));
        let ha = stack_or_heap(&mut sa, &mut va, self.d * (ma + 1));
        self.hermite_table(x, &self.x_shift, &self.x_scale, mx, hx);
        self.hermite_table(a, &self.i_shift, &self.i_scale, ma, ha);
        for (o, (alpha, beta)) in out.iter_mut().zip(&self.terms) {
            let mut v = 1.0;
            for j in 0..self.d {
                v *= hx[j * (mx + 1) + alpha[j] as usize] * ha[j * (ma + 1) + beta[j] as usize];
            }
            *o = v;
        }
    }

    /// Freezes `x` in the fitted function `Σ coef·φ(x, ·)`, leaving a cheap
    /// function of `a` for the ball search.
    pub fn a_part(&self, coef: &[f64], x: &[f64]) -> APart {
        if let BasisKind::PiecewiseConstant { resolution: r } = self.kind {
            let na = self.a_cells(r);
            let xc = Self::cell_index(x, &self.x_shift, &self.x_scale, &self.x_active, r);
            return APart::Cells {
                values: coef[xc * na..(xc + 1) * na].to_vec(),
                resolution: r,
                shift: self.i_shift.clone(),
                scale: self.i_scale.clone(),
                active: self.i_active.clone(),
            };
        }
        let mx = self.max_x;
        let mut sx = [0.0; 32];
        let mut vx = Vec::new();
        let hx = stack_or_heap(&mut sx, &mut vx, self.d * (mx + 1));
        self.hermite_table(x, &self.x_shift, &self.x_scale, mx, hx);
        let mut betas = Vec::with_capacity(self.groups.len() * self.d);
        let weights: Vec<f64> = self
            .groups
            .iter()
            .map(|(beta, cols)| {
                betas.extend_from_slice(beta);
                cols.iter()
                    .map(|(alpha, col)| coef[*col] * (0..self.d).map(|j| hx[j * (mx + 1) + alpha[j] as usize]).product::<f64>())
                    .sum()
            })
            .collect();
        if self.d == 1 && self.max_a < 8 {
            return APart::Univariate { power: hermite_to_power(&betas, &weights, self.max_a), shift: self.i_shift[0], scale: self.i_scale[0] };
        }
        APart::Poly { d: self.d, max_a: self.max_a, betas, weights, shift: self.i_shift.clone(), scale: self.i_scale.clone() }
    }
}

/// Power-basis coefficients of `Σ_g w_g h_{β_g}(t)` for `d = 1`.
fn hermite_to_power(betas: &[u8], weights: &[f64], m: usize) -> [f64; 8] {
    let mut h = [[0.0; 8]; 8];
    h[0][0] = 1.0;
    if m > 0 {
        h[1][1] = 1.0;
    }
    for n in 1..m {
        let nf = n as f64;
        let (c1, c0) = ((nf + 1.0).sqrt().recip(), (nf / (nf + 1.0)).sqrt());
        for p in 0..=n + 1 {
            let shifted = if p > 0 { h[n][p - 1] } else { 0.0 };
            h[n + 1][p] = c1 * shifted - c0 * h[n - 1][p];
        }
    }
    let mut out = [0.0; 8];
    for (b, w) in betas.iter().zip(weights) {
        for p in 0..8 {
            out[p] += w * h[*b as usize][p];
        }
    }
    out
}

/// A fitted function of `a` with `x` frozen.
#[derive(Debug, Clone)]
pub enum APart {
    /// `d = 1`: a polynomial in the standardized control.
    Univariate { power: [f64; 8], shift: f64, scale: f64 },
    Poly {
        d: usize,
        max_a: usize,
        /// `betas[g * d + j]`, one weight per group `g`.
        betas: Vec<u8>,
        weights: Vec<f64>,
        shift: Vec<f64>,
        scale: Vec<f64>,
    },
    Cells {
        values: Vec<f64>,
        resolution: usize,
        shift: Vec<f64>,
        scale: Vec<f64>,
        active: Vec<bool>,
    },
}

impl APart {
    /// `scratch` is reused across calls to avoid allocation.
    pub fn eval(&self, a: &[f64], scratch: &mut Vec<f64>) -> f64 {
        match self {
            APart::Poly { d, max_a, betas, weights, shift, scale } => {
                let (d, m) = (*d, *max_a);
                let mut stack = [0.0; 32];
                let h = stack_or_heap(&mut stack, scratch, d * (m + 1));
                for j in 0..d {
                    hermite((a[j] - shift[j]) / scale[j], m, &mut h[j * (m + 1)..(j + 1) * (m + 1)]);
                }
                let mut total = 0.0;
                for (g, w) in weights.iter().enumerate() {
                    let mut v = *w;
                    for j in 0..d {
                        v *= h[j * (m + 1) + betas[g * d + j] as usize];
                    }
                    total += v;
                }
                total
            }
            APart::Univariate { power, shift, scale } => {
                let t = (a[0] - shift) / scale;
                power.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            APart::Cells { values, resolution, shift, scale, active } => values[StepBasis::cell_index(a, shift, scale, active, *resolution)],
        }
    }
}
