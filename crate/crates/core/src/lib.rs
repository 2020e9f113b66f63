//! Class-imbalance laboratory: synthetic Gaussian tasks with known ground
//! truth, optimal-classifier oracles, imbalance measures, the logit
//! perturbation loss family and a bilevel trainer that meta-learns the
//! perturbation weights.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod taskgen;
pub mod trainer;

pub use dataset::{Dataset, Graph};
pub use error::{Error, Result};
pub use numerics::{ClassStats, CovarianceMode, DenseMatrix, Purpose, RngStream};
pub use taskgen::GaussianTaskSpec;
