//! Minimal reverse-mode network layers on channel-major `f64` activations.
//!
//! Each layer caches what its backward pass needs during a [`Mode::Train`]
//! forward and consumes that cache in `backward`, accumulating parameter
//! gradients into [`Param::grad`].

mod layers;
mod tensor;

pub use layers::{
    BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2, Mode, Param, Relu, Sequential,
    StateVisitor, StateVisitorMut, WideBlock,
};
pub use tensor::FeatureMap;

