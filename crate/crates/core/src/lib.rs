//! Semi-dual unbalanced entropic optimal transport solved as a stochastic
//! control problem over Brownian bridges, plus the reference solvers used to
//! check it.

pub mod autodiff;
pub mod bridge;
pub mod checkpoint;
pub mod data;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod oracles;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
