//! Generalized zero-shot learning with a generative dual adversarial network:
//! a conditional VAE feature generator, a regressor back to class
//! embeddings, and a discriminator scoring feature/embedding pairs.

pub mod adam;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{GdanConfig, GdanModel, Hyperparams};
pub use tensor::Matrix;
