//! Monte Carlo solver for viscous Hamilton-Jacobi equations
//!
//! ```text
//! -u_t - 1/2 tr(σσᵀ D²u) - b·Du + F(x, u, ϱᵀDu) = 0,   u(T) = g
//! ```
//!
//! The control is randomized: an auxiliary Brownian state `I` drives the
//! forward dynamics through `ϱ(X) I`, and the solution is read off a BSDE
//! whose `dB`-martingale part is constrained to vanish. The constraint is
//! approached by a penalization ladder in `n`.
//!
//! Modules:
//! - [`problem`]: problem instances, assumption checks, Fenchel conjugate
//! - [`forward`]: simulation of `(X, I)`, plain and tilted
//! - [`bsde`]: backward regression solver and the penalization ladder
//! - [`dual`]: Girsanov-tilted estimates bracketing the penalized solution
//! - [`oracles`]: Cole-Hopf, Riccati and 1-D finite differences

// argument checks are written `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod dual;
pub mod error;
pub mod forward;
pub mod oracles;
pub mod problem;
pub mod stats;

pub use error::{Error, Result};
