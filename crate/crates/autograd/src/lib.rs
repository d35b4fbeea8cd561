//! Reverse-mode automatic differentiation for small convolutional and
//! graph-convolutional networks on the CPU.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the crate root
//! exports single- and double-precision aliases.

pub mod conv;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{he_normal, Bound, NamedParam, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
