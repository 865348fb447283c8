//! Evolutionary search for layer-wise fine-tuning schemes in few-shot
//! classification.
//!
//! A backbone is pre-trained on base classes, then every parameterized layer
//! is assigned a learning rate from a small zoo (rate 0 freezes the layer).
//! An evolutionary search picks the assignment that maximizes accuracy on
//! validation episodes, and the winner is evaluated on novel-class episodes.

pub mod data;
pub mod error;
pub mod nn;
pub mod search;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
