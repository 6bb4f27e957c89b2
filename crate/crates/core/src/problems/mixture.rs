use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::density::{Density, SampleableDensity};
use crate::error::{check_dim, Error, Result};
use crate::scalar::{log_sum_exp, Real};

/// `Σ_k w_k N(m_k, Σ_k)` with SPD covariances.
///
/// Precisions, Cholesky factors and log-normalizers are computed once in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec<T>", into = "MixtureSpec<T>", bound = "")]
pub struct GaussianMixture<T: Real> {
    weights: Vec<T>,
    means: Array2<T>,
    covs: Vec<Array2<T>>,
    precisions: Vec<Array2<T>>,
    chols: Vec<Array2<T>>,
    // log w_k - ½ log det(2π Σ_k)
    log_norms: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MixtureSpec<T: Real> {
    pub weights: Vec<T>,
    pub means: Array2<T>,
    pub covs: Vec<Array2<T>>,
}

impl<T: Real> TryFrom<MixtureSpec<T>> for GaussianMixture<T> {
    type Error = Error;
    fn try_from(s: MixtureSpec<T>) -> Result<Self> {
        Self::new(&s.weights, s.means, s.covs)
    }
}

impl<T: Real> From<GaussianMixture<T>> for MixtureSpec<T> {
    fn from(m: GaussianMixture<T>) -> Self {
        MixtureSpec {
            weights: m.weights,
            means: m.means,
            covs: m.covs,
        }
    }
}

pub(crate) fn to_na<T: Real>(a: &Array2<T>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]].as_f64())
}

pub(crate) fn from_na<T: Real>(m: &nalgebra::DMatrix<f64>) -> Array2<T> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| T::lit(m[(i, j)]))
}

impl<T: Real> GaussianMixture<T> {
    /// Weights are renormalized; each covariance must be symmetric positive definite.
    pub fn new(weights: &[T], means: Array2<T>, covs: Vec<Array2<T>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Config("a mixture needs at least one component".into()));
        }
        check_dim("mixture means", k, means.nrows())?;
        check_dim("mixture covariances", k, covs.len())?;
        let d = means.ncols();
        if weights.iter().any(|&w| !(w > T::zero()) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture means".into()));
        }
        let total: T = weights.iter().copied().sum();
        let weights: Vec<T> = weights.iter().map(|&w| w / total).collect();
        let mut precisions = Vec::with_capacity(k);
        let mut chols = Vec::with_capacity(k);
        let mut log_norms = Vec::with_capacity(k);
        for (c, w) in covs.iter().zip(&weights) {
            check_dim("covariance rows", d, c.nrows())?;
            check_dim("covariance cols", d, c.ncols())?;
            let m = to_na(c);
            if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                return Err(Error::Config("covariance is not symmetric".into()));
            }
            let ch = nalgebra::Cholesky::new(m)
                .ok_or_else(|| Error::Config("covariance is not positive definite".into()))?;
            let l = ch.l();
            let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let ln2pi = (2.0 * std::f64::consts::PI).ln();
            log_norms.push(T::lit(w.as_f64().ln() - 0.5 * (logdet + d as f64 * ln2pi)));
            precisions.push(from_na(&ch.inverse()));
            chols.push(from_na(&l));
        }
        Ok(Self {
            weights,
            means,
            covs,
            precisions,
            chols,
            log_norms,
        })
    }

    /// Components sharing the covariance `var · I`.
    pub fn isotropic(weights: &[T], means: Array2<T>, var: T) -> Result<Self> {
        let d = means.ncols();
        let cov = Array2::eye(d) * var;
        let covs = vec![cov; weights.len()];
        Self::new(weights, means, covs)
    }

    /// Equal weights, means uniform on `[-1, 1]^d`, covariances `var · I`.
    pub fn random_prior<R: Rng + ?Sized>(d: usize, k: usize, var: T, rng: &mut R) -> Result<Self> {
        let means = Array2::from_shape_simple_fn((k, d), || T::lit(rng.random_range(-1.0..1.0)));
        Self::isotropic(&vec![T::one(); k], means, var)
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<T> {
        &self.means
    }

    pub fn covs(&self) -> &[Array2<T>] {
        &self.covs
    }

    pub fn precisions(&self) -> &[Array2<T>] {
        &self.precisions
    }

    pub fn mean(&self) -> Array1<T> {
        let w = ArrayView1::from(&self.weights);
        self.means.t().dot(&w)
    }

    pub fn covariance(&self) -> Array2<T> {
        let mu = self.mean();
        let d = self.means.ncols();
        let mut c = Array2::zeros((d, d));
        for (k, &w) in self.weights.iter().enumerate() {
            let dm = &self.means.row(k) - &mu;
            let outer = dm.view().insert_axis(Axis(1)).dot(&dm.view().insert_axis(Axis(0)));
            c.scaled_add(w, &(&self.covs[k] + &outer));
        }
        c
    }

    /// Per-row component log terms `log w_k N(x | m_k, Σ_k)` (n × K) and the
    /// per-component gradients `-P_k (x - m_k)`.
    fn components(&self, xs: ArrayView2<T>) -> (Array2<T>, Vec<Array2<T>>) {
        let n = xs.nrows();
        let k = self.weights.len();
        let mut logs = Array2::zeros((n, k));
        let mut grads = Vec::with_capacity(k);
        for c in 0..k {
            let diff = &xs - &self.means.row(c);
            let pd = diff.dot(&self.precisions[c]);
            let quad = (&diff * &pd).sum_axis(Axis(1));
            logs.column_mut(c)
                .assign(&quad.mapv(|q| self.log_norms[c] - T::lit(0.5) * q));
            grads.push(-pd);
        }
        (logs, grads)
    }

    fn responsibilities(logs: &Array2<T>) -> (Array1<T>, Array2<T>) {
        let mut lse = Array1::zeros(logs.nrows());
        let mut r = logs.clone();
        for (i, mut row) in r.outer_iter_mut().enumerate() {
            let l = log_sum_exp(&row.to_vec());
            lse[i] = l;
            row.mapv_inplace(|v| (v - l).exp());
        }
        (lse, r)
    }
}

fn row<T: Real>(x: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((1, x.len()), x).expect("row")
}

impl<T: Real> Density<T> for GaussianMixture<T> {
    fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn log_density(&self, x: &[T], _y: &[T]) -> T {
        let (logs, _) = self.components(row(x));
        log_sum_exp(&logs.row(0).to_vec())
    }

    fn grad_log_density(&self, x: &[T], _y: &[T]) -> Vec<T> {
        let e = Array2::zeros((1, 0));
        self.grad_log_density_batch(row(x), e.view()).row(0).to_vec()
    }

    fn hvp(&self, x: &[T], _y: &[T], v: &[T]) -> Option<Vec<T>> {
        let e = Array2::zeros((1, 0));
        Some(self.hvp_batch(row(x), e.view(), row(v)).row(0).to_vec())
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>) -> Array1<T> {
        let (logs, _) = self.components(xs);
        Self::responsibilities(&logs).0
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>) -> Array2<T> {
        let (logs, grads) = self.components(xs);
        let (_, r) = Self::responsibilities(&logs);
        let mut g = Array2::zeros(xs.raw_dim());
        for (c, gc) in grads.iter().enumerate() {
            g += &(gc * &r.column(c).insert_axis(Axis(1)));
        }
        g
    }

    /// `Σ r_k (-P_k v) + Σ r_k g_k (g_k·v) - ḡ (ḡ·v)`.
    fn hvp_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>, vs: ArrayView2<T>) -> Array2<T> {
        let (logs, grads) = self.components(xs);
        let (_, r) = Self::responsibilities(&logs);
        let mut h = Array2::zeros(xs.raw_dim());
        let mut gbar = Array2::zeros(xs.raw_dim());
        for (c, gc) in grads.iter().enumerate() {
            let rc = r.column(c).insert_axis(Axis(1));
            let pv = vs.dot(&self.precisions[c]);
            let gv = (gc * &vs).sum_axis(Axis(1)).insert_axis(Axis(1));
            h += &(&(gc * &gv - pv) * &rc);
            gbar += &(gc * &rc);
        }
        let gbv = (&gbar * &vs).sum_axis(Axis(1)).insert_axis(Axis(1));
        h - gbar * gbv
    }
}

impl<T: Real> SampleableDensity<T> for GaussianMixture<T> {
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<T> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut r in out.outer_iter_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut c = self.weights.len() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w.as_f64();
                if u < acc {
                    c = k;
                    break;
                }
            }
            let xi = Array1::from_shape_simple_fn(d, || T::std_normal(rng));
            r.assign(&(&self.means.row(c) + &self.chols[c].dot(&xi)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let b = Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
        b.t().dot(&b) + Array2::<f64>::eye(d) * 0.3
    }

    fn random_mixture(d: usize, k: usize, rng: &mut ChaCha8Rng) -> GaussianMixture<f64> {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let m = Array2::from_shape_simple_fn((k, d), || rng.random_range(-2.0..2.0));
        let covs = (0..k).map(|_| spd(d, rng)).collect();
        GaussianMixture::new(&w, m, covs).unwrap()
    }

    #[test]
    fn single_component_is_standard_gaussian() {
        let g = GaussianMixture::isotropic(&[1.0], Array2::zeros((1, 3)), 1.0).unwrap();
        let x = [0.3, -1.0, 2.0];
        let want = -1.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (0.09 + 1.0 + 4.0);
        assert!((g.log_density(&x, &[]) - want).abs() < 1e-12);
    }

    #[test]
    fn far_tail_is_finite() {
        let m = Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap();
        let g = GaussianMixture::<f64>::isotropic(&[1.0, 1.0], m, 0.01).unwrap();
        let lp = g.log_density(&[1e4], &[]);
        assert!(lp.is_finite());
        let gr = g.grad_log_density(&[1e4], &[]);
        assert!((gr[0] + (1e4 - 1.0) / 0.01).abs() < 1e-6 * 1e6);
    }

    #[test]
    fn gradient_and_hvp_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let g = random_mixture(3, 3, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(gradient_error(&g, &x, &[], 1e-5, 1e-3) < 1e-6);
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = g.hvp(&x, &[], &v).unwrap();
            let eps = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
            let gp = g.grad_log_density(&xp, &[]);
            let gm = g.grad_log_density(&xm, &[]);
            for j in 0..3 {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((fd - h[j]).abs() <= 1e-6 * fd.abs().max(1e-2), "{fd} vs {}", h[j]);
            }
        }
    }

    #[test]
    fn sample_moments_match_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_mixture(2, 3, &mut rng);
        let n = 200_000;
        let s = g.sample(n, &mut rng);
        let mean = s.mean_axis(Axis(0)).unwrap();
        let cov = g.covariance();
        for j in 0..2 {
            let se = (cov[[j, j]] / n as f64).sqrt();
            assert!((mean[j] - g.mean()[j]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn serde_round_trip_rebuilds_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_mixture(2, 2, &mut rng);
        let s = serde_json::to_string(&g).unwrap();
        let h: GaussianMixture<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn rejects_bad_covariance() {
        let c = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(GaussianMixture::new(&[1.0], Array2::zeros((1, 2)), vec![c]).is_err());
    }
}
