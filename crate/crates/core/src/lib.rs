//! Growing small dense transformers into larger ones and scaling them out
//! into mixtures of experts, with a reference model to check the result.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod growth;
pub mod model;
pub mod moe;
pub mod ops;
pub mod rng;
pub mod savings;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{count_params, load_checkpoint, save_checkpoint, Checkpoint, ParamCount};
pub use config::{validate_config, ModelConfig};
pub use error::{Error, Result};
pub use moe::MoEConfig;
pub use tensor::{Scalar, Tensor};
