//! Residual convolutional classifier trained on CPU.

pub mod layers;
pub mod resnet;
mod tensor;

pub use layers::Param;
pub use resnet::{Adam, AdamConfig, ResNet18, ResNetConfig};
pub use tensor::Tensor;
