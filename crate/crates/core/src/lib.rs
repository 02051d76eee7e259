pub mod error;
pub mod cli;
pub mod config;
pub mod elliptic;
pub mod grid;
pub mod linalg;
pub mod simulate;
pub mod spectral;
pub mod synthesis;
pub mod verify;

pub use error::{Error, Result};
