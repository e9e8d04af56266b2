//! Cascaded conformer-transducer speech recognizer with a tied-and-reduced
//! decoder, trained and compressed (knowledge distillation) on synthetic
//! token-prototype audio. Everything is CPU f32 with f64 accumulation and
//! fully deterministic under explicit seeds.

pub mod bench;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod conformer;
pub mod container;
pub mod data;
pub mod decode;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod wer;

pub use error::{Error, Result};
