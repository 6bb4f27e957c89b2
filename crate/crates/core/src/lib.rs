//! Stochastic normalizing flows: Markov chains that interleave learnable
//! coupling flows with Langevin and Metropolis-Hastings layers, trained on a
//! path KL loss, plus the inverse problems and metrics used to assess them.
//!
//! Numerical code is generic over [`Real`] (`f32`/`f64`); the aliases below fix
//! the scalar to `f64`.

pub mod adam;
pub mod chain;
pub mod codec;
pub mod density;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod kernels;
pub mod nn;
pub mod oracle;
pub mod problems;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Chain = chain::Chain<f64>;
pub type Layer = chain::Layer<f64>;
pub type PathBatch = chain::PathBatch<f64>;
pub type CouplingFlow = flow::ConditionalCouplingFlow<f64>;
pub type CouplingBlock = flow::CouplingBlock<f64>;
pub type DenseNet = nn::DenseNet<f64>;
pub type GaussianMixture = problems::GaussianMixture<f64>;
pub type LinearGaussianProblem = problems::LinearGaussianProblem<f64>;
pub type MixedNoiseProblem = problems::MixedNoiseProblem<f64>;
