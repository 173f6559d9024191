//! Temporal reasoning self-attention for video classifiers, spatio-temporal
//! perturbation saliency, and object-centric attention scoring.
//!
//! Everything is built on a small `f64` tensor library with tape-based
//! reverse-mode differentiation ([`autodiff`]).

pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod error;
pub mod explain;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod trb;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;
