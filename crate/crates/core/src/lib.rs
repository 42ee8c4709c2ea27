//! Multi-head attention with joint agent-map representation for multimodal
//! trajectory prediction, together with its training and evaluation tooling.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
