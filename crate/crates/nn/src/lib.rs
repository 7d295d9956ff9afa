//! Minimal CPU deep-learning engine: NCHW tensors, an eager reverse-mode tape,
//! im2col convolutions, Adam, and the U-Net / patch-critic architectures.
//!
//! All computation is single-threaded and allocation-order deterministic, so
//! a fixed seed reproduces training bit for bit.

mod adam;
pub mod conv;
mod float;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use float::Float;
pub use graph::{softmax_channels, Gradients, Graph, Var};
pub use layers::{Conv2d, PatchDiscriminator, PatchDiscriminatorConfig, UNet, UNetConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed parameter archive: {0}")]
    Format(String),
}
