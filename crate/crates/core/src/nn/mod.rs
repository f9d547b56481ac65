//! Minimal dense network substrate: tensors, reverse-mode autodiff, MLPs,
//! Adam, target-network averaging, quantile-level embeddings, checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod embed;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use embed::{cosine_features, TauEmbedding, COSINE_BASIS};
pub use graph::{expectile, huber, Gradients, Graph, Var};
pub use layers::{copy_params, module_grads, polyak_update, Activation, Linear, Mlp, Module};
pub use tensor::Tensor;
