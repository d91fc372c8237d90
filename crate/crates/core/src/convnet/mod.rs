//! Fully convolutional patch classifier: layers, training and inference.

use thiserror::Error;

pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod layers;
pub mod network;
pub mod real;
pub mod spec;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use dense::{dense_forward, dense_forward_image, dense_forward_with, DEFAULT_TILE_CELLS};
pub use network::{accumulate_gradient, argmax, forward, loss_and_gradient};
pub use real::Real;
pub use spec::{
    build_network, ConvParams, ConvSpec, Layer, NetworkParams, NetworkSpec, Padding, CANONICAL_WIDTHS, PATCH_SIZE,
};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum ConvNetError {
    #[error("a classifier needs at least 2 classes, got {0}")]
    InvalidClassCount(usize),
    #[error("input of {height}x{width} is smaller than the {min}x{min} minimum")]
    InputTooSmall { height: usize, width: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
