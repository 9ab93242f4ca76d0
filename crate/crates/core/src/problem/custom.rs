//! Problems declared as coefficient tables (TOML/JSON). No expression
//! language: coefficients are affine, `F` and `g` are polynomial.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ConjugateConfig, ConjugateFn, GrowthProfile, ProblemSpec};
use crate::stats::norm;
use crate::{Error, Result};

/// `v(x) = matrix · x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineVector {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

/// `M(x) = constant + Σ_i x_i · linear[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMatrix {
    pub constant: Vec<Vec<f64>>,
    #[serde(default)]
    pub linear: Vec<Vec<Vec<f64>>>,
}

/// `coef · Π x_i^{exponents[i]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub exponents: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    #[serde(default)]
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|m| m.coef * m.exponents.iter().zip(x).map(|(e, xi)| xi.powi(*e as i32)).product::<f64>())
            .sum()
    }
}

/// `coef · |z|^power`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZTerm {
    pub coef: f64,
    pub power: f64,
}

/// `F(x, y, z) = Σ_k coef_k |z|^{power_k} + y_coef · y + x_part(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianTable {
    pub z_terms: Vec<ZTerm>,
    #[serde(default)]
    pub y_coef: f64,
    #[serde(default)]
    pub x_part: Polynomial,
}

impl HamiltonianTable {
    pub fn eval(&self, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let nz = norm(z);
        self.z_terms.iter().map(|t| t.coef * nz.powf(t.power)).sum::<f64>() + self.y_coef * y + self.x_part.eval(x)
    }

    /// Closed form for a single superlinear term:
    /// `f = (p-1)/p |a| (|a|/(c p))^{1/(p-1)} - y_coef y - x_part(x)`.
    fn closed_form(&self) -> Option<ConjugateFn> {
        match self.z_terms.as_slice() {
            [t] if t.power > 1.0 && t.coef > 0.0 => {
                let (c, p, yc, xp) = (t.coef, t.power, self.y_coef, self.x_part.clone());
                Some(Arc::new(move |x: &[f64], a: &[f64], y: f64| {
                    let na = norm(a);
                    let r = (na / (c * p)).powf(1.0 / (p - 1.0));
                    (p - 1.0) / p * na * r - yc * y - xp.eval(x)
                }))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomConfig {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub drift: AffineVector,
    pub sigma: AffineMatrix,
    pub rho: AffineMatrix,
    pub hamiltonian: HamiltonianTable,
    pub terminal: Polynomial,
    pub growth: GrowthProfile,
    #[serde(default)]
    pub conjugate: Option<ConjugateConfig>,
}

fn check_matrix(name: &str, m: &[Vec<f64>], d: usize) -> Result<()> {
    if m.len() != d || m.iter().any(|r| r.len() != d) {
        return Err(Error::Structural(format!("{name} must be {d}x{d}")));
    }
    Ok(())
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn affine_matrix_fn(am: &AffineMatrix) -> impl Fn(&[f64]) -> Vec<f64> + Send + Sync {
    let c = flatten(&am.constant);
    let lin: Vec<Vec<f64>> = am.linear.iter().map(|m| flatten(m)).collect();
    move |x: &[f64]| {
        let mut out = c.clone();
        for (xi, m) in x.iter().zip(&lin) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += xi * v;
            }
        }
        out
    }
}

impl CustomConfig {
    pub fn build(&self) -> Result<ProblemSpec> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Structural("dim must be >= 1".into()));
        }
        check_matrix("drift.matrix", &self.drift.matrix, d)?;
        if self.drift.offset.len() != d {
            return Err(Error::Structural(format!("drift.offset must have length {d}")));
        }
        for (name, am) in [("sigma", &self.sigma), ("rho", &self.rho)] {
            check_matrix(&format!("{name}.constant"), &am.constant, d)?;
            if !am.linear.is_empty() && am.linear.len() != d {
                return Err(Error::Structural(format!("{name}.linear needs one matrix per coordinate")));
            }
            for m in &am.linear {
                check_matrix(&format!("{name}.linear"), m, d)?;
            }
        }
        for m in self.terminal.terms.iter().chain(&self.hamiltonian.x_part.terms) {
            if m.exponents.len() != d {
                return Err(Error::Structural(format!("monomial exponents must have length {d}")));
            }
        }
        let drift = self.drift.clone();
        let ham = self.hamiltonian.clone();
        let term = self.terminal.clone();
        Ok(ProblemSpec {
            name: self.name.clone(),
            dim: d,
            drift: Arc::new(move |x: &[f64]| {
                drift.matrix.iter().zip(&drift.offset).map(|(row, c)| c + row.iter().zip(x).map(|(m, v)| m * v).sum::<f64>()).collect()
            }),
            sigma: Arc::new(affine_matrix_fn(&self.sigma)),
            rho: Arc::new(affine_matrix_fn(&self.rho)),
            conjugate_closed_form: ham.closed_form(),
            hamiltonian: Arc::new(move |x: &[f64], y: f64, z: &[f64]| ham.eval(x, y, z)),
            terminal: Arc::new(move |x: &[f64]| term.eval(x)),
            horizon: self.horizon,
            growth: self.growth.clone(),
            conjugate_cfg: self.conjugate.clone().unwrap_or_default(),
        })
    }
}
