//! Synthetic scenes, on-disk datasets, rasters and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod raster;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use dataset::{Batch, Dataset, Pair};
pub use synth::{generate_scene, generate_translation, SceneParams, SyntheticSample};
