//! City-world toolkit: build a world of cities, generate geometric task
//! datasets, train small autoregressive transformers on them, and analyze the
//! resulting internal representations (linear probing, PCA, CKA, fine-tuning
//! generalization).

pub mod config;
pub mod datagen;
pub mod model;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod plots;
pub mod repr;
pub mod rng;
pub mod tasks;
pub mod tokenizer;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
