//! Acoustic model: parameters, forward/backward passes, optimizer and
//! checkpoint files.

mod checkpoint;
mod config;
mod model;
mod optim;
mod tensors;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, load_optimizer, save_checkpoint,
    save_optimizer, CHECKPOINT_VERSION,
};
pub use config::{ConvSpec, ModelConfig};
pub use model::{
    backward, forward, init_params, reinit_head, Batch, ForwardOutput, Gradients, Lattice, Mode, ModelCheckpoint,
    RngState,
};
pub use optim::Sgd;
pub use tensors::TensorSet;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("utterance {utterance} with {frames} frames is too short for the convolution stack")]
    TooShort { utterance: usize, frames: usize },
    #[error("forward pass was run without a tape (inference mode)")]
    NoTape,
    #[error("tensor {tensor} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { tensor: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint config differs from expected config: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
