//! Masked structure refinement with Gaussian positional message passing for
//! predicting binding free-energy changes of protein complex mutations.

pub mod autodiff;
pub mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod mmm;
pub mod model;
pub mod pdc;
pub mod pipeline;
pub mod structure;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
