//! Numerical gluing of asymptotically Euclidean metrics with interpolated
//! scalar curvature.
//!
//! Given two metrics `g` and `ghat` that both approach the flat metric at
//! large distance, the crate deforms their cutoff interpolation
//! `g_chi = chi*ghat + (1-chi)*g` on a cone-like transition region so that
//! the scalar curvature of the result equals `chi*R(ghat) + (1-chi)*R(g)`.
//! The deformation is sought in the weighted ansatz
//! `h = phi^4 psi^2 Pstar(dN)`, which forces `h` to vanish to all orders at
//! the region boundary and lets the glued metric be extended by zero.
//!
//! The crate also ships a small laboratory for the weighted Hardy-Poincare
//! inequalities that make the linearized problem solvable, with
//! Rayleigh-quotient estimation of the best constants.
//!
//! Module map:
//! - [`grid`], [`linalg`], [`summation`], [`smooth`]: grids, per-point dense
//!   helpers, deterministic reductions, the shared mollifier.
//! - [`tensor`]: curvature, the scalar-curvature linearization `P` and its
//!   formal adjoint `Pstar`.
//! - [`domain`]: scale-invariant cone-shell domains, defining functions,
//!   log-rotation diffeomorphisms and pullbacks.
//! - [`weights`]: the weights `phi = x^2/r`, `psi = r^mu x^sigma e^{-s r/x}`,
//!   cutoffs, and weighted Sobolev norms.
//! - [`interpolation`]: analytic metric generators, metric pairs, the
//!   interpolated target curvature, and translation/scaling preconditioning.
//! - [`solver`]: the weighted fourth-order operator, preconditioned CG, the
//!   fixed-point iteration, and extension by zero.
//! - [`inequality`]: numerical checks of the integral identity and of the
//!   polynomial / exponential weighted Poincare inequalities.
//! - [`reports`]: decay fits, ADM mass, CSV reports.
//! - [`config`] and [`scenario`]: run configuration and orchestration used
//!   by the `scglue` binary and the examples.

pub mod config;
pub mod domain;
pub mod error;
pub mod grid;
pub mod inequality;
pub mod interpolation;
pub mod io;
pub mod linalg;
pub mod reports;
pub mod scenario;
pub mod smooth;
pub mod solver;
pub mod summation;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
