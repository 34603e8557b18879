//! Desk-scale language-model detoxification.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod pipeline;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
