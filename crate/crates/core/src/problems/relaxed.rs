use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::density::{Density, SampleableDensity};
use crate::scalar::Real;

/// Uniform law on `[-1, 1]^d` with exponential tails of rate `α`:
/// `q(x) = α/(2α+2) · exp(-α dist(x, [-1, 1]))` per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedUniform {
    pub dim: usize,
    pub alpha: f64,
}

impl RelaxedUniform {
    pub fn new(dim: usize, alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
        Self { dim, alpha }
    }

    fn log_inside(&self) -> f64 {
        (self.alpha / (2.0 * self.alpha + 2.0)).ln()
    }
}

fn excess<T: Real>(v: T) -> T {
    if v > T::one() {
        v - T::one()
    } else if v < -T::one() {
        -T::one() - v
    } else {
        T::zero()
    }
}

/// `d log q / dx`; the kink at ±1 takes the interior value 0.
fn slope<T: Real>(v: T, alpha: T) -> T {
    if v > T::one() {
        -alpha
    } else if v < -T::one() {
        alpha
    } else {
        T::zero()
    }
}

impl<T: Real> Density<T> for RelaxedUniform {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[T], _y: &[T]) -> T {
        let a = T::lit(self.alpha);
        T::lit(self.log_inside() * self.dim as f64) - a * x.iter().map(|&v| excess(v)).sum::<T>()
    }

    fn grad_log_density(&self, x: &[T], _y: &[T]) -> Vec<T> {
        let a = T::lit(self.alpha);
        x.iter().map(|&v| slope(v, a)).collect()
    }

    fn hvp(&self, x: &[T], _y: &[T], _v: &[T]) -> Option<Vec<T>> {
        Some(vec![T::zero(); x.len()])
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>) -> Array1<T> {
        let a = T::lit(self.alpha);
        let c = T::lit(self.log_inside() * self.dim as f64);
        xs.map_axis(Axis(1), |r| c - a * r.iter().map(|&v| excess(v)).sum::<T>())
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>) -> Array2<T> {
        let a = T::lit(self.alpha);
        xs.mapv(|v| slope(v, a))
    }

    fn hvp_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>, _vs: ArrayView2<T>) -> Array2<T> {
        Array2::zeros(xs.raw_dim())
    }
}

impl<T: Real> SampleableDensity<T> for RelaxedUniform {
    /// Exact: the interval carries mass `α/(α+1)`, each tail `1/(2α+2)`.
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<T> {
        let inside = self.alpha / (self.alpha + 1.0);
        Array2::from_shape_simple_fn((n, self.dim), || {
            let u: f64 = rng.random();
            let v = if u < inside {
                rng.random_range(-1.0..=1.0)
            } else {
                let e = -(1.0 - rng.random::<f64>()).ln() / self.alpha;
                if rng.random::<bool>() {
                    1.0 + e
                } else {
                    -1.0 - e
                }
            };
            T::lit(v)
        })
    }
}
