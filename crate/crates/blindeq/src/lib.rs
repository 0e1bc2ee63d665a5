//! Blind adaptive equalization and channel estimation for coherent
//! communications, trained by variational inference.

pub mod autodiff;
pub mod channel;
pub mod equalize;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod modem;
pub mod sigproc;

pub use error::{Error, Result};
