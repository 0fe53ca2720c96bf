//! Minimal dense-tensor numerics: a reverse-mode tape, a few layers, Adam,
//! a seedable random source and a finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;
pub mod random;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use nn::{linear, Activation, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use random::{gumbel_noise, RandomSource};
pub use tensor::Tensor;
