//! Transient-stability toolkit for grid-following inverters: full-order
//! outer-loop model, bandwidth-separation reductions, equilibria, regions of
//! attraction, fault simulation and critical-clearing-time search.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`.

// Negated comparisons reject NaN on purpose; indexed loops mirror the tableaux.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod equilibria;
pub mod error;
pub mod model;
pub mod ode;
pub mod params;
pub mod reduced;
pub mod roa;
pub mod scalar;
pub mod scenarios;
pub mod sim;

pub use error::{ModelError, Result};
pub use scalar::{wrap_angle, Scalar};

/// `f64` instantiations of the generic types.
pub type Params = params::SystemParams<f64>;
pub type Bandwidths = params::BandwidthSpec<f64>;
pub type State = model::FullState<f64>;
pub type Equilibria = equilibria::EquilibriumPair<f64>;
pub type Trajectory = sim::Trajectory<f64>;
pub type SimOptions = sim::SimOptions<f64>;
pub type SimulationResult = sim::SimulationResult<f64>;
pub type Mode = scenarios::OperatingMode<f64>;
