//! Stochastic linear-quadratic optimal control: stationary pairs, storage
//! functions, exact finite-horizon solutions and turnpike diagnostics.

pub mod dissipativity;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod montecarlo;
pub mod ocp;
pub mod par;
pub mod stationary;
pub mod statopt;

pub use error::{Error, Result};
pub use instances::{reference_problem, NoiseKind};
pub use linalg::{Matrix, Vector};
pub use model::{CostSpec, Distribution, MomentState, ProblemSpec, SystemSpec};
pub use ocp::{AffinePolicy, MomentTrajectory};
pub use par::Execution;
pub use stationary::{StationaryPair, StorageData};
