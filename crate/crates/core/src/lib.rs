//! Multi-modal, multi-granularity generative error correction for joint
//! accent recognition and speech recognition, at toy scale on synthetic data.

pub mod arfusion;
pub mod cli;
pub mod config;
pub mod correction;
pub mod ctc;
pub mod encoders;
pub mod error;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
