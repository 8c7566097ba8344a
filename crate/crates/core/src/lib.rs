//! Exact convex training of path-regularized three-layer parallel ReLU networks.

pub mod arrangements;
pub mod baseline;
pub mod cone;
pub mod convex_program;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod loss;
pub mod lowrank;
mod lp;
pub mod network;
pub mod recovery;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases.
pub type Net = network::ParallelNet<f64>;
pub type Program = convex_program::ConvexProgram<f64>;
pub type Variables = convex_program::ConvexVariables<f64>;

/// Single-precision aliases.
pub type NetF32 = network::ParallelNet<f32>;
pub type ProgramF32 = convex_program::ConvexProgram<f32>;
pub type VariablesF32 = convex_program::ConvexVariables<f32>;
