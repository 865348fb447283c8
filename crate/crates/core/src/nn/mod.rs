//! A small neural-network engine with hand-derived gradients.
//!
//! Backbones are stacks of [`LayerSpec`]s; only dense and convolution layers
//! carry parameters, and those are exactly the layers a learning-rate scheme
//! addresses. Heads sit on top of the backbone embedding and are not part of
//! the scheme.

pub mod checkpoint;
pub mod gradcheck;
mod head;
mod layer;
mod network;
mod optim;

pub use head::{
    class_means, cosine_scores, degenerate_cosine_count, head_loss, predict,
    prototype_episode_loss, prototype_scores, softmax_cross_entropy, CosineHead, CosineScores,
    Head, HeadKind, PrototypeHead, SoftmaxHead, DEFAULT_COSINE_SCALE,
};
pub use layer::{infer_shapes, LayerSpec, ParamBlock};
pub use network::{sgd_step, Gradients, Network};
pub use optim::{adam_step, AdamConfig, AdamState};
