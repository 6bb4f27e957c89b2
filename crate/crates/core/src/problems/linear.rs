use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::mixture::{from_na, to_na, GaussianMixture};
use super::InverseProblem;
use crate::density::{Density, SampleableDensity};
use crate::error::{check_dim, Error, Result};
use crate::scalar::{log_sum_exp, Real};

/// `Y = A X + η`, `η ~ N(0, b² I)`, Gaussian-mixture prior on `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinearGaussianProblem<T: Real> {
    a: Array2<T>,
    noise_var: T,
    prior: GaussianMixture<T>,
}

impl<T: Real> LinearGaussianProblem<T> {
    pub fn new(a: Array2<T>, noise_var: T, prior: GaussianMixture<T>) -> Result<Self> {
        check_dim("operator columns", prior.dim(), a.ncols())?;
        if !(noise_var > T::zero()) || !noise_var.is_finite() {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator entries".into()));
        }
        Ok(Self { a, noise_var, prior })
    }

    /// `A = scale · diag(1, 1/2, …, 1/d)`.
    pub fn harmonic_diagonal(d: usize, scale: T) -> Array2<T> {
        Array2::from_shape_fn((d, d), |(i, j)| {
            if i == j {
                scale / T::lit((i + 1) as f64)
            } else {
                T::zero()
            }
        })
    }

    pub fn operator(&self) -> &Array2<T> {
        &self.a
    }

    pub fn noise_var(&self) -> T {
        self.noise_var
    }

    pub fn prior_mixture(&self) -> &GaussianMixture<T> {
        &self.prior
    }

    /// Closed-form posterior mixture for observation `y`:
    /// `Σ̃_k = (AᵀA/b² + Σ_k⁻¹)⁻¹`, `m̃_k = Σ̃_k (Aᵀy/b² + Σ_k⁻¹ m_k)` and
    /// `w̃_k ∝ w_k |Σ̃_k|^½ |Σ_k|^-½ exp(½ (m̃_kᵀ Σ̃_k⁻¹ m̃_k - m_kᵀ Σ_k⁻¹ m_k))`.
    pub fn analytic_posterior(&self, y: &[T]) -> Result<GaussianMixture<T>> {
        check_dim("observation", self.a.nrows(), y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation".into()));
        }
        let a = to_na(&self.a);
        let b2 = self.noise_var.as_f64();
        let yv = nalgebra::DVector::from_iterator(y.len(), y.iter().map(|v| v.as_f64()));
        let ata = a.transpose() * &a / b2;
        let aty = a.transpose() * yv / b2;
        let k = self.prior.num_components();
        let d = self.prior.dim();
        let mut logw = Vec::with_capacity(k);
        let mut means = Array2::zeros((k, d));
        let mut covs = Vec::with_capacity(k);
        for c in 0..k {
            let sigma = to_na(&self.prior.covs()[c]);
            let prec = to_na(&self.prior.precisions()[c]);
            let m = nalgebra::DVector::from_iterator(d, self.prior.means().row(c).iter().map(|v| v.as_f64()));
            let post_prec = &ata + &prec;
            let ch = nalgebra::Cholesky::new(post_prec.clone())
                .expect("posterior precision of an SPD prior is SPD");
            let post_cov = ch.inverse();
            let pm = &prec * &m;
            let mt = &post_cov * (&aty + &pm);
            let logdet_post = -2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let logdet_prior = 2.0
                * nalgebra::Cholesky::new(sigma)
                    .expect("prior covariance is SPD")
                    .l()
                    .diagonal()
                    .iter()
                    .map(|v| v.ln())
                    .sum::<f64>();
            let quad = mt.dot(&(&post_prec * &mt)) - m.dot(&pm);
            logw.push(self.prior.weights()[c].as_f64().ln() + 0.5 * (logdet_post - logdet_prior) + 0.5 * quad);
            for j in 0..d {
                means[[c, j]] = T::lit(mt[j]);
            }
            // symmetrize against round-off before the SPD check
            let sym = (&post_cov + post_cov.transpose()) * 0.5;
            covs.push(from_na(&sym));
        }
        let lse = log_sum_exp(&logw);
        let w: Vec<T> = logw.iter().map(|l| T::lit((l - lse).exp().max(f64::MIN_POSITIVE))).collect();
        GaussianMixture::new(&w, means, covs)
    }
}

impl<T: Real> Density<T> for LinearGaussianProblem<T> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn cond_dim(&self) -> usize {
        self.a.nrows()
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

    fn hvp(&self, x: &[T], y: &[T], v: &[T]) -> Option<Vec<T>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        let vv = ArrayView2::from_shape((1, v.len()), v).expect("row");
        Some(self.hvp_batch(xv, yv, vv).row(0).to_vec())
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T> {
        self.log_likelihood_batch(xs, ys) + self.prior.log_density_batch(xs, ys.slice(ndarray::s![.., ..0]))
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array2<T> {
        let r = &ys - &xs.dot(&self.a.t());
        let mut g = r.dot(&self.a) / self.noise_var;
        g += &self.prior.grad_log_density_batch(xs, ys.slice(ndarray::s![.., ..0]));
        g
    }

    fn hvp_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>, vs: ArrayView2<T>) -> Array2<T> {
        let mut h = vs.dot(&self.a.t()).dot(&self.a) / (-self.noise_var);
        h += &self.prior.hvp_batch(xs, ys.slice(ndarray::s![.., ..0]), vs);
        h
    }
}

impl<T: Real> InverseProblem<T> for LinearGaussianProblem<T> {
    fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    fn prior(&self) -> &dyn SampleableDensity<T> {
        &self.prior
    }

    fn posterior(&self) -> &dyn Density<T> {
        self
    }

    fn forward_map_batch(&self, xs: ArrayView2<T>) -> Array2<T> {
        xs.dot(&self.a.t())
    }

    /// Drops the constant `-d̃/2 log(2π b²)`.
    fn log_likelihood_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T> {
        let r = &ys - &xs.dot(&self.a.t());
        (&r * &r).sum_axis(Axis(1)) * (-T::lit(0.5) / self.noise_var)
    }

    fn sample_observations(&self, xs: ArrayView2<T>, rng: &mut dyn RngCore) -> Array2<T> {
        let b = self.noise_var.sqrt();
        let mut y = self.forward_map_batch(xs);
        y.mapv_inplace(|v| v + b * T::std_normal(rng));
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(rng: &mut ChaCha8Rng, d: usize, k: usize) -> LinearGaussianProblem<f64> {
        let prior = GaussianMixture::random_prior(d, k, 0.05, rng).unwrap();
        let a = Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
        LinearGaussianProblem::new(a, 0.1, prior).unwrap()
    }

    /// Textbook conjugate update via the Kalman-gain form.
    fn kalman(a: &Array2<f64>, b2: f64, m: &Array1<f64>, s: &Array2<f64>, y: &[f64]) -> (Array1<f64>, Array2<f64>) {
        let sa = s.dot(&a.t());
        let innov = a.dot(&sa) + Array2::<f64>::eye(a.nrows()) * b2;
        let inv = from_na::<f64>(&to_na(&innov).try_inverse().unwrap());
        let gain = sa.dot(&inv);
        let resid = Array1::from(y.to_vec()) - a.dot(m);
        (m + &gain.dot(&resid), s - &gain.dot(&a.dot(s)))
    }

    #[test]
    fn single_component_matches_kalman_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = problem(&mut rng, 3, 1);
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let post = p.analytic_posterior(&y).unwrap();
            let (m, s) = kalman(p.operator(), 0.1, &p.prior_mixture().means().row(0).to_owned(), &p.prior_mixture().covs()[0], &y);
            for j in 0..3 {
                assert!((post.means()[[0, j]] - m[j]).abs() < 1e-10);
                for l in 0..3 {
                    assert!((post.covs()[0][[j, l]] - s[[j, l]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_operator_returns_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = GaussianMixture::<f64>::random_prior(2, 3, 0.02, &mut rng).unwrap();
        let p = LinearGaussianProblem::new(Array2::zeros((2, 2)), 0.05, prior.clone()).unwrap();
        let post = p.analytic_posterior(&[0.7, -0.2]).unwrap();
        for k in 0..3 {
            assert!((post.weights()[k] - prior.weights()[k]).abs() < 1e-12);
            for j in 0..2 {
                assert!((post.means()[[k, j]] - prior.means()[[k, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_match_marginal_likelihoods() {
        // w̃_k ∝ w_k N(y | A m_k, b² I + A Σ_k Aᵀ)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let p = problem(&mut rng, 2, 3);
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let post = p.analytic_posterior(&y).unwrap();
            let pr = p.prior_mixture();
            let a = p.operator();
            let logs: Vec<f64> = (0..3)
                .map(|k| {
                    let cov = a.dot(&pr.covs()[k]).dot(&a.t()) + Array2::<f64>::eye(2) * 0.1;
                    let mean = a.dot(&pr.means().row(k));
                    let g = GaussianMixture::new(&[1.0], mean.insert_axis(Axis(0)), vec![cov]).unwrap();
                    pr.weights()[k].ln() + g.log_density(&y, &[])
                })
                .collect();
            let l = log_sum_exp(&logs);
            for k in 0..3 {
                let want = (logs[k] - l).exp();
                assert!((post.weights()[k] - want).abs() <= 1e-10 * want.max(1e-300) + 1e-300);
            }
        }
    }

    #[test]
    fn posterior_density_differs_from_analytic_by_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = problem(&mut rng, 2, 2);
        let y = [0.3, -0.4];
        let post = p.analytic_posterior(&y).unwrap();
        let diffs: Vec<f64> = (0..100)
            .map(|_| {
                let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                p.log_density(&x, &y) - post.log_density(&x, &[])
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / 100.0;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 100.0;
        assert!(var < 1e-10, "{var}");
    }

    #[test]
    fn posterior_gradient_and_hvp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = problem(&mut rng, 3, 2);
        let y = [0.1, 0.2, -0.3];
        let x = [0.2, -0.1, 0.4];
        assert!(crate::density::gradient_error(&p, &x, &y, 1e-5, 1e-3) < 1e-6);
        let v = [0.3, 1.0, -0.5];
        let h = p.hvp(&x, &y, &v).unwrap();
        let fd = crate::density::fd_hvp_batch(
            &p,
            ArrayView2::from_shape((1, 3), &x).unwrap(),
            ArrayView2::from_shape((1, 3), &y).unwrap(),
            ArrayView2::from_shape((1, 3), &v).unwrap(),
        );
        for j in 0..3 {
            assert!((fd[[0, j]] - h[j]).abs() < 1e-5 * h[j].abs().max(1.0));
        }
    }

    #[test]
    fn observation_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = problem(&mut rng, 2, 3);
        let n = 100_000;
        let (_, ys) = p.sample_joint(n, &mut rng);
        let a = p.operator();
        let mu = a.dot(&p.prior_mixture().mean());
        let cov = a.dot(&p.prior_mixture().covariance()).dot(&a.t()) + Array2::<f64>::eye(2) * 0.1;
        let mean = ys.mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            assert!((mean[j] - mu[j]).abs() < 4.0 * (cov[[j, j]] / n as f64).sqrt());
        }
    }
}
