//! Multi-teacher distillation of vision transformers with nested
//! (Matryoshka) embeddings.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod image;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
