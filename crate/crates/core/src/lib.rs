//! Kolmogorov-Arnold networks with activation watermarking.
//!
//! The crate provides B-spline KAN layers with exact gradients, an MLP
//! baseline, an orthonormal DCT, watermark embedding and detection on the
//! first layer's outputs, removal attacks (fine-tuning, pruning, retraining)
//! and a JSON-based experiment runner.

pub mod attacks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kan;
pub mod mlp;
pub mod numeric;
pub mod report;
pub mod spline;
pub mod train;
pub mod transform;
pub mod watermark;

pub use error::{Error, Result};
pub use kan::{KanLayer, KanModel};
pub use mlp::MlpModel;
pub use numeric::Mat;
