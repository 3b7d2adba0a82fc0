//! Numerical laboratory for Polchinski renormalization flows of finite-dimensional
//! Gibbs measures.

pub mod covariance;
pub mod curvature;
pub mod error;
pub mod flow;
pub mod grid;
pub mod linalg;
pub mod phi4;
pub mod potential;
pub mod quadrature;
pub mod spectral;

pub use covariance::{CovarianceAt, CovarianceSchedule, ScheduleKind, TableRow};
pub use error::{Error, Result};
pub use potential::{Derivs, GaussianKernel, Potential, PotentialDescriptor, PotentialForm, Renormalized, TiltedMeasure};
pub use flow::{FlowMeasure, FlowOptions, Semigroup};
pub use grid::{Field, Grid, GridFunction, TestFunction};
pub use quadrature::QuadratureRule;
pub use spectral::{Drift, GeneratorDiscretization, SpectralResult};
