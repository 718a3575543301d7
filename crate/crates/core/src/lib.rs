pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod heads;
pub mod image;
pub mod io;
pub mod model;
pub mod params;
pub mod rng;
pub mod scene;
pub mod targets;
pub mod task;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
