//! Weakly supervised attention for fine-grained recognition, computed from
//! the activations of dense local classifiers.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod multiscale;
pub mod seed;
pub mod tensor;

pub use error::{Error, FileFormat, Result};
