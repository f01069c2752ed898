pub mod attention;
pub mod cli;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod network;
pub mod pnm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::TensorF;
