//! muldef-core: a small neural-net engine with exact input gradients, the
//! FGSM / Carlini-Wagner / black-box substitute attacks built on it, and a
//! randomized model-family defense with its evaluation harness.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layer;
pub mod model_file;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
