pub mod attack;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod harness;
pub mod io;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
