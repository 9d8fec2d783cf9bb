//! Adaptive joint source-channel coding over simulated wireless channels.

pub mod adaptation;
pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod data;
pub mod entropy_model;
pub mod error;
pub mod jscc_codec;
pub mod metrics;
pub mod model_delta_codec;
pub mod model;
pub mod nn;
pub mod optim;
pub mod range_coder;
pub mod transforms;

pub use error::{AscError, Result};
