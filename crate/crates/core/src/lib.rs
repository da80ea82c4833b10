//! Numerical toolkit for degenerate Kolmogorov chains
//! `dX¹ = F₁ dt + σ dW`, `dXⁱ = Fᵢ(t, x_{i-1}, …, x_n) dt`.
//!
//! The modules follow the natural pipeline: a [`chain_model::ChainModel`],
//! its deterministic Peano flows ([`flow_engine`]), the frozen Gaussian
//! proxy built along those flows ([`parametrix`]), Green and parametrix
//! kernels with mixed-norm estimates ([`green_kernel`]), Monte Carlo
//! ensembles ([`mc_simulate`]) and the Peano sharpness experiments
//! ([`peano_lab`]).
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default); results are bitwise identical to the sequential fallback.

pub mod chain_model;
pub mod dense;
pub mod error;
pub mod exec;
pub mod flow_engine;
pub mod green_kernel;
pub mod mc_simulate;
pub mod parametrix;
pub mod peano_lab;
pub mod quad;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
