//! Interpretable text-to-image diffusion built from B-cos layers.
//!
//! Every layer computes an input-dependent linear map, so the whole sampler
//! can be frozen into one linear function of its inputs and read back as
//! contribution maps.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tape::{Gradients, LeafKind, NodeId, Tape};
pub use tensor::{ConvGeometry, Tensor};
