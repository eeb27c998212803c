//! Multimodal parallel split learning engine.

pub mod analysis;
pub mod baselines;
pub mod data;
pub mod error;
pub mod model;
pub mod protocol;
pub mod transport;

pub use error::{Error, Result};
