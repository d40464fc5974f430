//! Numeric core and model library for contextualized, equivariant
//! positional encoding (TAPE) experiments at desk scale.
//!
//! Everything is built on a small dense f64 tensor type with reverse-mode
//! differentiation; the model layers, symmetry test harnesses, the explicit
//! word-problem construction, and the synthetic training tasks live in
//! their own modules.

pub mod autodiff;
pub mod error;
pub mod equivariance;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nc1;
pub mod posenc;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
