//! Solver library for congestion-constrained chemotaxis dynamics.
//!
//! The density of a population follows the gradient of a chemical signal it
//! generates itself, subject to the hard constraint `rho <= 1`. Time stepping
//! is the constrained minimizing-movement (JKO) scheme: each step minimizes
//! `W2^2 / (2 tau) + J(rho)` over densities below the ceiling, where `W2` is
//! the quadratic Wasserstein distance and `J` couples entropy with the
//! self-generated potential. The congestion pressure is recovered two
//! independent ways (from the step's Kantorovich potential and from an
//! obstacle problem on the saturated set) and every a-priori estimate the
//! scheme guarantees is checked along the run.
//!
//! Modules mirror the solver layers:
//!
//! * [`grid`] — uniform Cartesian grids (1D/2D) and discrete calculus,
//! * [`elliptic`] — the screened Poisson solve for the chemical potential,
//! * [`transport`] — Wasserstein distances, maps and dual potentials,
//! * [`jko`] — one constrained minimizing-movement step,
//! * [`obstacle`] — the pressure obstacle problem on the saturated set,
//! * [`diagnostics`] — trajectory-level invariant checks,
//! * [`sim`] — configuration, scenarios, the stepping driver and file output.

pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod grid;
pub mod jko;
pub mod obstacle;
pub mod sim;
pub mod transport;

pub use error::CoreError;
pub use grid::{BcRole, DensityField, Grid, ScalarField, VectorField};
