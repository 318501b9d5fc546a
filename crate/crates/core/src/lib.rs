//! Prediction, prevention and evaluation of attribute entanglement in
//! text-guided latent manipulation.

pub mod category;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod latent;
pub mod mapper;
pub mod predict;
pub mod toy;

pub use error::{Error, Result};
