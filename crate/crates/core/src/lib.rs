pub mod audio_io;
pub mod beats;
pub mod dsp;
pub mod error;
pub mod model;
pub mod motion;
pub mod nn;
pub mod selfcheck;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
