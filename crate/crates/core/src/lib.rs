//! Topic scene graphs: joint image and relational captioning, attention
//! distillation into relationship importance, evaluation metrics and a
//! synthetic benchmark generator.

pub mod autodiff;
pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod features;
pub mod generate;
pub mod inspect;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
