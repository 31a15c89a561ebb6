//! Self-interpretable window vision GNN.
//!
//! The model processes an image as a hierarchy of patch-node grids: a
//! non-overlapping convolutional stem, three stages of window-confined graph
//! blocks with kernel-2/stride-2 downsampling in between, and a stochastic
//! attention bottleneck over the global graph of window embeddings. The
//! bottleneck's per-edge probabilities double as the model's explanation:
//! ranking them reveals which long-range window relations drive a prediction.
//!
//! Alongside the model the crate ships the surrounding experiment tooling:
//! a synthetic dataset with planted cross-window dependencies, training with
//! cosine-annealed decoupled weight decay, explanation export/rendering, and
//! explanation-quality metrics (edge-insertion curves, integrated gradients,
//! occlusion, infidelity, PQ sparsity).

pub mod backbone;
pub mod bottleneck;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod forward;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod render;
pub mod tensor;
pub mod trainer;

pub use config::{BottleneckConfig, ModelConfig, TaskKind, TrainConfig};
pub use error::{Error, Result};
pub use model::{Model, Prediction, Target};
