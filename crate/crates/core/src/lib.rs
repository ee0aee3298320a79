//! Pathwise solver for the heat equation driven by a rough signal,
//!
//! ```text
//! dy_t = Δy_t dt + Σ_i f_i(y_t) dx^i_t   on the torus [0, 2π)^n,
//! ```
//!
//! taken in mild form. The pieces:
//!
//! - [`algebra`]: time grids, increments, the coboundaries `δ` and `δ̂`,
//!   Hölder estimators and dyadic sewing.
//! - [`semigroup`]: spectral fields and the heat semigroup with its
//!   smoothing estimates.
//! - [`signal`]: driving paths, fractional Brownian sampling and the
//!   piecewise-linear level-2/3 lifts with a checksummed file format.
//! - [`convrp`]: the operators obtained by convolving the lift with the
//!   semigroup, and an audit of their algebraic relations.
//! - [`dynamics`]: vector fields, the Young/rough2/regularized/rough3
//!   schemes, a Picard solver and remainder diagnostics.

pub mod algebra;
pub mod convrp;
pub mod dynamics;
pub mod error;
pub mod semigroup;
pub mod signal;

pub use algebra::{TimeGrid, Vector};
pub use convrp::ConvolutionalRoughPath;
pub use dynamics::{solve, picard_solve, Nonlinearity, Scheme, SolveReport, SolverConfig};
pub use error::{Error, Result};
pub use semigroup::{GridFunction, SpectralGrid};
pub use signal::{DrivingPath, RoughSignal};
