//! Split learning laboratory: a small reverse-mode autodiff engine, the
//! reference CNNs, the client/server split training protocol in three
//! topologies, and the server-side model inversion, model stealing and label
//! inference attacks that run over what an honest-but-curious server observes.

pub mod attacks;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
