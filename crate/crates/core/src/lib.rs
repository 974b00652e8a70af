//! Monte Carlo solver for semilinear parabolic problems with nonlinear Neumann
//! boundary conditions on convex domains.
//!
//! The boundary behaviour is realised two ways: by reflected diffusions (a
//! projection scheme) and by penalized diffusions driven back into the domain
//! by a drift `-n delta(x)`. Both forward models feed the same generalized
//! backward solver, whose value at the start of the path estimates `u(t, x)`
//! (reflected) or `u^n(t, x)` (penalized).

pub mod bsde_solver;
pub mod diagnostics;
pub mod error;
pub mod forward_sim;
pub mod geometry;
pub mod harness;
pub mod problems;
pub mod rng;

pub use error::{Error, Result};
