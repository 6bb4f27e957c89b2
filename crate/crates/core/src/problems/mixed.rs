use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::RngCore;

use super::relaxed::RelaxedUniform;
use super::InverseProblem;
use crate::density::{Density, SampleableDensity};
use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::scalar::Real;

/// `Y = F(X) + a F(X) η₁ + b η₂` with a network forward map and relaxed
/// uniform prior, so `Y | X = x ~ N(F(x), diag(a² F(x)² + b²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedNoiseProblem<T: Real> {
    forward: DenseNet<T>,
    a: T,
    b: T,
    prior: RelaxedUniform,
}

impl<T: Real> MixedNoiseProblem<T> {
    pub fn new(forward: DenseNet<T>, a: T, b: T, alpha: f64) -> Result<Self> {
        if a < T::zero() || !(b > T::zero()) {
            return Err(Error::Config("noise constants need a >= 0 and b > 0".into()));
        }
        let prior = RelaxedUniform::new(forward.input_dim(), alpha);
        Ok(Self { forward, a, b, prior })
    }

    pub fn forward_net(&self) -> &DenseNet<T> {
        &self.forward
    }

    pub fn noise(&self) -> (T, T) {
        (self.a, self.b)
    }

    pub fn relaxed_prior(&self) -> &RelaxedUniform {
        &self.prior
    }

    fn variance(&self, f: T) -> T {
        self.a * self.a * f * f + self.b * self.b
    }
}

impl<T: Real> Density<T> for MixedNoiseProblem<T> {
    fn dim(&self) -> usize {
        self.forward.input_dim()
    }

    fn cond_dim(&self) -> usize {
        self.forward.output_dim()
    }

    fn log_density(&self, x: &[T], y: &[T]) -> T {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        self.log_density_batch(xv, yv)[0]
    }

    fn grad_log_density(&self, x: &[T], y: &[T]) -> Vec<T> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        self.grad_log_density_batch(xv, yv).row(0).to_vec()
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T> {
        let e = Array2::zeros((xs.nrows(), 0));
        self.log_likelihood_batch(xs, ys) + self.prior.log_density_batch(xs, e.view())
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array2<T> {
        let cache = self.forward.forward_cached(xs);
        let f = cache.output();
        // d/dF [-(y-F)²/(2s) - ½ log s],  s = a²F² + b²
        let mut up = Array2::zeros(f.raw_dim());
        let a2 = self.a * self.a;
        let half = T::lit(0.5);
        Zip::from(&mut up).and(f).and(&ys).for_each(|u, &f, &y| {
            let s = self.variance(f);
            let r = y - f;
            let ds = (a2 + a2) * f;
            *u = r / s + (r * r / (s * s) * half - half / s) * ds;
        });
        let mut g = self.forward.backward_input_batch(&cache, up.view());
        let e = Array2::zeros((xs.nrows(), 0));
        g += &self.prior.grad_log_density_batch(xs, e.view());
        g
    }
}

impl<T: Real> InverseProblem<T> for MixedNoiseProblem<T> {
    fn obs_dim(&self) -> usize {
        self.forward.output_dim()
    }

    fn prior(&self) -> &dyn SampleableDensity<T> {
        &self.prior
    }

    fn posterior(&self) -> &dyn Density<T> {
        self
    }

    fn forward_map_batch(&self, xs: ArrayView2<T>) -> Array2<T> {
        self.forward.forward_batch(xs)
    }

    /// Keeps the `x`-dependent normalizer `-½ Σ log s_j`; drops `2π`.
    fn log_likelihood_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T> {
        let f = self.forward.forward_batch(xs);
        let half = T::lit(0.5);
        let mut terms = Array2::zeros(f.raw_dim());
        Zip::from(&mut terms).and(&f).and(&ys).for_each(|t, &f, &y| {
            let s = self.variance(f);
            let r = y - f;
            *t = -half * (r * r / s + s.ln());
        });
        terms.sum_axis(Axis(1))
    }

    fn sample_observations(&self, xs: ArrayView2<T>, rng: &mut dyn RngCore) -> Array2<T> {
        let mut y = self.forward.forward_batch(xs);
        y.mapv_inplace(|f| {
            let e1 = T::std_normal(rng);
            let e2 = T::std_normal(rng);
            f + self.a * f * e1 + self.b * e2
        });
        y
    }
}

/// Checks that `ys` has one row per `xs` row with the observation width.

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::gradient_error;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem(a: f64) -> MixedNoiseProblem<f64> {
        let net = DenseNet::init_seeded(&[3, 8, 5], Activation::Tanh, 3).unwrap();
        MixedNoiseProblem::new(net, a, 0.1, 1000.0).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences_inside_box() {
        let p = problem(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| 0.9 * (2.0 * f64::unit_uniform(&mut rng) - 1.0)).collect();
            let f = p.forward_net().forward(&x).unwrap();
            let y: Vec<f64> = f.iter().map(|v| v + 0.05 * f64::std_normal(&mut rng)).collect();
            assert!(gradient_error(&p, &x, &y, 1e-6, 1e-2) < 1e-5);
        }
    }

    #[test]
    fn zero_multiplicative_noise_is_plain_gaussian_likelihood() {
        let p = problem(0.0);
        let x = Array2::from_shape_vec((1, 3), vec![0.1, -0.2, 0.3]).unwrap();
        let f = p.forward_map_batch(x.view());
        let y = &f + 0.05;
        let ll = p.log_likelihood_batch(x.view(), y.view())[0];
        let want = -0.5 * 5.0 * (0.05f64 * 0.05 / 0.01) - 0.5 * 5.0 * 0.01f64.ln();
        assert!((ll - want).abs() < 1e-12);
    }

    #[test]
    fn conditional_variance_matches_noise_model() {
        let p = problem(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let x = Array2::from_shape_fn((n, 3), |(_, j)| [0.3, -0.5, 0.8][j]);
        let y = p.sample_observations(x.view(), &mut rng);
        let f = p.forward_map_batch(x.slice(ndarray::s![..1, ..]));
        for j in 0..5 {
            let col = y.column(j);
            let m = col.mean().unwrap();
            let v = col.mapv(|c| (c - m).powi(2)).sum() / (n - 1) as f64;
            let want = 0.04 * f[[0, j]].powi(2) + 0.01;
            assert!((v - want).abs() < 0.03 * want, "{v} vs {want}");
        }
    }

    #[test]
    fn noiseless_limit_reproduces_forward_map() {
        let net = DenseNet::init_seeded(&[3, 4, 2], Activation::Tanh, 9).unwrap();
        let p = MixedNoiseProblem::new(net, 0.0, 1e-300, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = p.sample_joint(10, &mut rng);
        let f = p.forward_map_batch(x.view());
        assert!((&y - &f).iter().all(|v: &f64| v.abs() < 1e-290));
    }
}
