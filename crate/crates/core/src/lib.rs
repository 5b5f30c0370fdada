//! Numerical laboratory for the two-dimensional minimal Keller-Segel system
//!
//! ```text
//! u_t = Δu - χ ∇·(u ∇v) + f(u),   τ v_t = Δv - v + u
//! ```
//!
//! on a rectangle with homogeneous Neumann boundaries. The crate analyzes a
//! kinetic source `f` (damping strength `mu`, mass bound `M`, boundedness
//! regime) and simulates the system while recording the functionals that
//! stay bounded for globally bounded solutions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod gn;
pub mod grid;
pub mod integrator;
pub mod kinetics;
pub mod operators;

pub use error::{Error, Result};
pub use grid::{entropy_integrand, integrate, norm, Grid, Norm, ScalarField};
pub use kinetics::{ExtReal, Regime, RegimeReport, SourceSpec};
