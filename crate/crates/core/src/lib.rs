//! Two-field topology optimization of voided lattice heat sinks on a
//! two-layer Darcy-Forchheimer model.
//!
//! Kernels are generic over [`scalar::Scalar`]; the aliases below fix the
//! scalar to `f64`, which is what the solvers and the optimizer use.

pub mod config;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod materials;
pub mod metrics;
pub mod mma;
pub mod model;
pub mod optimizer;
pub mod scalar;
pub mod sensitivity;
pub mod sparse;
pub mod thermal;
pub mod validation;

pub use config::OptimizationConfig;
pub use error::{Error, Result};
pub use geometry::BeamGraph;
pub use model::{DesignField, PhysicalParams};
pub use optimizer::{run_optimization, RunRecord};
pub use sensitivity::Pipeline;

pub type LatticePropertyTable = materials::PropertyTable<f64>;
pub type PropertySample = materials::PropertySample<f64>;
pub type LatticeProps = materials::LatticeProps<f64>;
pub type DiameterRange = materials::DiameterRange<f64>;
pub type FluidLimit = materials::FluidLimit<f64>;
