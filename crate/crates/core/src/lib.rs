//! Desk-scale transformer engine with LoRA fine-tuning and a prompt-based
//! classification harness.

pub mod error;
pub mod eval;
pub mod format;
pub mod lora;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{DecodeSession, Model, ModelConfig};
pub use rng::{gaussian_fill, SeededRng};
pub use tensor::Tensor;
