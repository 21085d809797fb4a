mod binio;
pub mod color;
pub mod config;
pub mod error;
pub mod fusion;
pub mod global;
pub mod io;
pub mod local;
mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
