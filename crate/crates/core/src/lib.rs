//! Placement planning for competing EV charging providers.
//!
//! The numeric kernels (`choice`, `grid`, `market`) are generic over
//! [`scalar::Scalar`]; the aliases below pin them to `f64`, which is what the
//! scenario, simulation and planning layers use.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod choice;
pub mod cli;
pub mod error;
pub mod game;
pub mod grid;
mod linalg;
pub mod market;
pub mod road;
pub mod scalar;
pub mod scenario;
pub mod seed;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
pub use market::{JointPlacement, Placement};
pub use scenario::{load_scenario, save_scenario, Scenario};
pub use world::World;

pub type Real = f64;
pub type ChoiceSetF64 = choice::ChoiceSet<f64>;
pub type ProbabilitiesF64 = choice::Probabilities<f64>;
pub type PowerFlowSolutionF64 = grid::PowerFlowSolution<f64>;
pub type MarketF64 = market::Market<f64>;
pub type PriceEquilibriumF64 = market::PriceEquilibrium<f64>;

pub type ChoiceSetF32 = choice::ChoiceSet<f32>;
pub type PowerFlowSolutionF32 = grid::PowerFlowSolution<f32>;
pub type MarketF32 = market::Market<f32>;
