//! EfficientNet3D video classification engine.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Scalar, Tensor};
