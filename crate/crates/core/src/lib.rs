pub mod data;
pub mod diffops;
pub mod dispnet;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod semnet;
pub mod stage;
pub mod synergy;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, RunOptions, Variant};
pub use stage::Stage;
pub use tensor::{Real, Tensor};
