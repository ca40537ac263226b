//! Numerical laboratory for feature-learning dynamics of GD and SAM on
//! synthetic patch data, plus one-shot upsampling of slow-learnable examples.

pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod spectral;
pub mod synthgen;
pub mod useful;

pub use error::{Error, Result};
