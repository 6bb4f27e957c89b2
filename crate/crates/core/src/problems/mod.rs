//! Priors, noise models and the posterior densities they induce.

use ndarray::{Array1, Array2, ArrayView2};
use rand::RngCore;

use crate::density::{Density, SampleableDensity};
use crate::scalar::Real;

pub mod linear;
pub mod mixed;
pub mod mixture;
pub mod relaxed;
pub mod surrogate;

pub use linear::LinearGaussianProblem;
pub use mixed::MixedNoiseProblem;
pub use mixture::GaussianMixture;
pub use relaxed::RelaxedUniform;
pub use surrogate::{surrogate_fit, synthetic_forward_map, SurrogateConfig, SurrogateReport};

/// `Y = F(X) + η` with a sampleable prior. The posterior family
/// `y ↦ p(x | y)` (unnormalized) is a conditional [`Density`] with
/// `cond_dim == obs_dim`.
pub trait InverseProblem<T: Real>: Send + Sync {
    fn obs_dim(&self) -> usize;

    fn prior(&self) -> &dyn SampleableDensity<T>;

    fn posterior(&self) -> &dyn Density<T>;

    fn forward_map_batch(&self, xs: ArrayView2<T>) -> Array2<T>;

    /// `log p(y | x)` up to an `x`-independent constant.
    fn log_likelihood_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T>;

    fn sample_observations(&self, xs: ArrayView2<T>, rng: &mut dyn RngCore) -> Array2<T>;

    /// `x ~ prior`, `y ~ p(· | x)`.
    fn sample_joint(&self, n: usize, rng: &mut dyn RngCore) -> (Array2<T>, Array2<T>) {
        let xs = self.prior().sample(n, rng);
        let ys = self.sample_observations(xs.view(), rng);
        (xs, ys)
    }
}
