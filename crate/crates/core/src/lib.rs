pub mod attention;
pub mod baselines;
pub mod cohort;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod tokenizer;

pub use error::{Error, Result};
