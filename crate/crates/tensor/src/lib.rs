//! Deterministic tensor math with a define-by-run tape, the layer primitives
//! used by the face alignment networks, and an RMSprop optimizer.
//!
//! Reference mode (serial) and parallel mode (convolution split over the
//! batch) produce bitwise-identical results; `FAN_REFERENCE_MODE=1` forces
//! reference mode regardless of [`set_parallel`].

pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

pub use error::{Result, TensorError};
pub use nn::{BatchNorm2d, Conv2d, Graph, Mode};
pub use ops::conv::{Conv2dSpec, Padding};
pub use ops::norm::{BnMode, RunningStats};
pub use optim::RmsPropState;
pub use param::{ParamId, ParamKind, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// True when `FAN_REFERENCE_MODE=1` is set in the environment.
pub fn reference_mode_forced() -> bool {
    static FORCED: OnceLock<bool> = OnceLock::new();
    *FORCED.get_or_init(|| std::env::var("FAN_REFERENCE_MODE").is_ok_and(|v| v == "1"))
}

/// Enables batch-parallel convolution.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed) && !reference_mode_forced()
}
