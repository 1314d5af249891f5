//! Scale-distribution decoupled (SDD) linear layers, `y = α ⊙ norm(V x)`,
//! embedded in toy dense and mixture-of-experts transformers, with the
//! numerical machinery to verify their gradients and equivalence properties.

pub mod error;
pub mod layers;
pub mod model;
pub mod exec;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{RngState, Tensor};
