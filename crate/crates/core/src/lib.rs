//! Hinter/reasoner co-training on a family of modular-arithmetic chain tasks
//! small enough that every trajectory distribution can be enumerated exactly.

pub mod config;
pub mod domain;
pub mod env;
pub mod error;
pub mod grpo;
pub mod hintloop;
pub mod policy;
pub mod reliance;
pub mod rng;
pub mod trainer;
pub mod vocab;

pub use error::{HillError, Result};
