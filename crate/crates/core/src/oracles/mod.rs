//! Reference solutions: Cole-Hopf for KPZ, the Riccati ODE for LQ, and an
//! explicit finite-difference scheme for one-dimensional instances.

mod cole_hopf;
mod fd;
mod riccati;

pub use cole_hopf::cole_hopf_kpz;
pub use fd::{fd_hjb_1d, fd_hjb_1d_saturated, FDGrid1D, FdSolution, Saturation};
pub use riccati::{riccati_lq, RiccatiSolution};
