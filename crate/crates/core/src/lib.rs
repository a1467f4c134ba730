//! Finite-horizon safety for discrete-time stochastic systems.
//!
//! The crate is organized around the pieces needed to certify and
//! validate a barrier-function safety filter under Gaussian process noise:
//!
//! - [`bounds`]: K-step exit-probability bounds from a nonnegative
//!   supermartingale built on the barrier, plus the witness itself.
//! - [`jensen`]: the Gaussian disturbance model and the Jensen gap between
//!   `E[h(x + d)]` and `h(x + E[d])`.
//! - [`barriers`]: quadratic, affine and polytopic barriers, and the
//!   log-sum-exp upper bound on the expected polytope margin.
//! - [`systems`]: control-affine one-step maps for the example systems.
//! - [`controllers`]: minimal-deviation safety filters.
//! - [`montecarlo`]: seeded, schedule-independent trial runner.

pub mod barriers;
pub mod bounds;
pub mod controllers;
mod error;
pub mod jensen;
mod linalg;
pub mod montecarlo;
pub mod rng;
pub mod solver;
pub mod stats;
pub mod systems;

pub use barriers::{Barrier, PolytopeSpec, Shape};
pub use bounds::{BoundCase, BoundResult, ExitBoundParams, SupermartingaleTrace};
pub use controllers::{FilterMode, FilterResult, FilterSpec, InfeasiblePolicy, NominalController};
pub use error::{Error, Result};
pub use jensen::{GaussianDisturbance, GapMethod, JensenGap};
pub use montecarlo::{Policy, TrialBatch, TrialConfig};
pub use systems::{ControlAffine, SystemModel};

/// Dense column vector used for states and inputs.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
