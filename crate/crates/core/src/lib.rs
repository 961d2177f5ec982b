pub mod ablation;
pub mod boxes;
pub mod cfpan;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod gcl;
pub mod gradsuite;
pub mod graph;
pub mod mrrpn;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor4;
