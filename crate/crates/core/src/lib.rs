//! Electricity price forecasting with a distilled attention transformer and
//! an autoencoder-gated extreme-condition model.

pub mod asm;
pub mod checkpoint;
pub mod dat;
pub mod data;
pub mod error;
pub mod eval;
pub mod hybrid;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, ErrorKind, Result};
