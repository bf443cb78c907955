//! Joint hierarchical Bayesian inference and neural closure learning for
//! populations of ODE/PDE systems, with optional online-trained neural
//! surrogates replacing the numerical forward solver.

pub mod bilevel;
pub mod closure;
pub mod config;
pub mod forward;
pub mod emit;
pub mod error;
pub mod fft;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod population;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod solvers;
pub mod surrogate;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::StreamRng;
pub use tensor::Tensor;
