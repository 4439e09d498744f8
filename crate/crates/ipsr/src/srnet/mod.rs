//! Tensor engine, training, and uint8 quantization for the fixed-operator
//! super-resolution network.

pub mod tensor;
pub mod ops;
pub mod net;
pub mod loss;
pub mod quant;
pub mod train;
pub mod io;

pub use loss::{compute_loss, loss_backward, FeatureExtractor, LossComponents, LossConfig};
pub use net::{
    backward_gradients, build_network, forward, forward_cached, Gradients, NetworkSpec, Weights,
};
pub use ops::ConvParams;
pub use quant::{calibrate_and_quantize, fake_quantize, QuantParams, QuantizedNetwork};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainLog};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SrnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: channels={channels}, scale={scale}")]
    InvalidArchitecture { channels: usize, scale: usize },
    #[error("quantization scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("empty training set")]
    EmptyData,
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("weight file unreadable: {0}")]
    Unreadable(std::io::Error),
    #[error("weight file unwritable: {0}")]
    Unwritable(std::io::Error),
    #[error("bad weight file magic")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    BadVersion(u16),
    #[error("weight file truncated or corrupt: {0}")]
    Corrupt(String),
}
