//! Radar-echo nowcasting with two parallel cross encoding pathways.
//!
//! The model predicts future radar echo frames from recent ones by
//! decomposing their evolution into optical-flow-field motion and morphologic
//! deformation. A flow encoder reads a correlation cost volume between
//! consecutive position-feature maps through a ConvLSTM and regresses a
//! displacement field; a deformation encoder warps the previous shape
//! features along that field, takes the residual against the current shape
//! features, and tracks it with a stack of dilated ConvLSTMs. A combiner and
//! a transposed-convolution decoder turn both pathway outputs back into a
//! frame.
//!
//! Everything is self-contained: dense tensors with reverse-mode
//! differentiation, the recurrent model, balanced losses, forecast
//! verification metrics, a synthetic blob dataset, an Adam trainer with
//! checkpointing, and a CLI.

pub mod cli;
pub mod config;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod flowdef;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
