//! Mixed-integer nonlinear MPC with a learned quadratic cost-to-go.
//!
//! The pipeline has three stages:
//!
//! 1. [`expert`] solves the long-horizon mixed-integer problem by
//!    branch-and-bound and produces state/decision demonstrations
//!    ([`closed_loop::demo_generate`]).
//! 2. [`ioc`] imputes `P` in `V(x) = (x - c)' P (x - c)` so that the
//!    demonstrations nearly satisfy the KKT conditions of the one-step
//!    problem, a PSD-constrained least squares solved by ADMM.
//! 3. [`myopic`] runs the one-step controller `min l(x, w) + V(f(x, w))`
//!    online; [`closed_loop`] simulates it against a mismatched, noisy plant.

pub mod cli_io;
pub mod closed_loop;
pub mod dynamics;
pub mod error;
pub mod expert;
pub mod ioc;
pub mod linalg;
pub mod myopic;
pub mod selftest;

pub use error::{Error, Result};
