//! Face alignment networks on a small tensor engine: architectures, heatmap
//! codec, data pipeline, training, evaluation and 3D annotation.

pub mod annotate;
pub mod arch;
pub mod batch;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod train;

pub use error::{CoreError, Result};
