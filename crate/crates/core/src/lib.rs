//! Generative prognostic model for treatment-effect estimation from tabular
//! covariates and image features.

pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod encoders;
pub mod jsonfmt;
pub mod metrics;
pub mod model;
pub mod repro;
pub mod sweep;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use data::{Cohort, OracleInfo, Sample};
pub use distributions::{DiagonalGaussian, MixtureGaussian};
pub use model::{Fusion, ModelConfig, ModelParams, PotentialOutcomes};
pub use tensor::Matrix;
