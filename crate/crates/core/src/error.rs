use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Function outputs disagree with the declared dimension, or a field is
    /// out of its domain. Not an assumption failure.
    #[error("malformed problem: {0}")]
    Structural(String),

    #[error("assumption violated ({check}) at {sample:?}: {detail}")]
    AssumptionViolation {
        check: String,
        sample: Vec<f64>,
        detail: String,
    },

    #[error("non-finite value of F at z = {z:?}")]
    NonFinite { z: Vec<f64> },

    #[error("hamiltonian is not convex in z; pass F~(x,y,z) = -F(x,-y,-z) instead")]
    ConcaveHamiltonian,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{flagged} of {n_paths} paths blew up (limit 0.1%)")]
    BlowUp { flagged: usize, n_paths: usize },

    #[error("tilt bound {bound} violated at step {step}, path {path} (|nu| = {norm})")]
    TiltBound {
        step: usize,
        path: usize,
        norm: f64,
        bound: f64,
    },

    #[error("regression ill-conditioned at step {step} (condition number {cond:.3e})")]
    IllConditioned { step: usize, cond: f64 },

    #[error("CFL condition violated: need nt >= {suggested_nt}")]
    Cfl { suggested_nt: usize },

    #[error("Riccati solution escapes to infinity near t = {t}")]
    RiccatiBlowUp { t: f64 },

    #[error("quadrature underflow; rescale lambda * g (exponent {exponent})")]
    Underflow { exponent: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
