//! Two-branch spatio-temporal action detector built from scratch on `f64`
//! tensors: a block-DCT frequency frontend with a 2-D backbone, a 3-D
//! ResNeXt-style clip backbone, channel-attention fusion and a YOLO-style
//! detection head, plus training, evaluation and saliency tooling.

pub mod backbones;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dct;
pub mod error;
pub mod fusion;
pub mod head;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
