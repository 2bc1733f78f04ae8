//! Appearance-preserving 3D convolution (AP3D) for video person
//! re-identification: a small reverse-mode tensor engine, the
//! appearance-preserving module, AP-I3D/AP-P3D residual blocks, ResNet-style
//! video backbones, and the training/evaluation/analysis pipeline around them.

pub mod apm;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod traineval;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{no_grad, Array, Tensor};
