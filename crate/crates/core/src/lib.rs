pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fem;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod spectral;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
