//! Layer toolkit with hand-written forward and backward passes.
//!
//! Layers keep a stack of activation caches: `forward_train` pushes one entry
//! per call and `backward` pops the most recent, so unrolling a recurrent
//! layer over T steps and back-propagating in reverse order needs no extra
//! bookkeeping. `forward` is the cache-free inference path.

mod batchnorm;
pub mod checkpoint;
mod conv;
mod elu;
pub mod gradcheck;
mod linear;
mod lstm;
mod param;

pub use batchnorm::{BatchNorm, BnMode, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2d;
pub use elu::{elu, Elu};
pub use linear::Linear;
pub use lstm::{Lstm, LstmState};
pub use param::Param;

use crate::error::Error;

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a cached forward pass"))
}
