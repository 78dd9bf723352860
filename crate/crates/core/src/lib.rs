//! Variance-minimizing treatment assignment for A/B tests on networks under a
//! conditional-autoregressive outcome model.

pub mod car;
pub mod criterion;
pub mod design;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod linalg;
pub mod optimizer;
pub mod rng;
pub mod stats;

pub use design::Design;
pub use error::{Error, Result};
pub use graph::{CovariateMatrix, Covariates, Network};
