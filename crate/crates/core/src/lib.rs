//! Volumetric classification networks (3D-VGG, 3D-ResNet and the residual
//! self-attention variant) with hand-written backward passes, 3D Grad-CAM
//! explanations, binary classification metrics and a synthetic phantom
//! generator for end-to-end checks at desk scale.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use model::{ArchitectureSpec, Model};
pub use tensor::{DType, Element, Init, Shape, Tensor};
