//! Unnormalized log-densities with gradients and Hessian-vector products.
//!
//! Every density takes a condition vector `y` of length [`Density::cond_dim`];
//! unconditional densities use `cond_dim() == 0` and ignore it. Batched methods
//! take `xs` of shape `n × dim` and `ys` of shape `n × cond_dim`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngCore;

use crate::scalar::{norm_sq, Real};

pub trait Density<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    fn cond_dim(&self) -> usize {
        0
    }

    fn log_density(&self, x: &[T], y: &[T]) -> T;

    fn grad_log_density(&self, x: &[T], y: &[T]) -> Vec<T>;

    /// `∇² log p(x) · v` when available in closed form.
    fn hvp(&self, _x: &[T], _y: &[T], _v: &[T]) -> Option<Vec<T>> {
        None
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T> {
        xs.outer_iter()
            .zip(ys.outer_iter())
            .map(|(x, y)| self.log_density(&x.to_vec(), &y.to_vec()))
            .collect()
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::zeros(xs.raw_dim());
        for ((x, y), mut row) in xs.outer_iter().zip(ys.outer_iter()).zip(out.outer_iter_mut()) {
            let g = self.grad_log_density(&x.to_vec(), &y.to_vec());
            row.assign(&Array1::from(g));
        }
        out
    }

    /// Row-wise Hessian-vector products. Uses [`Density::hvp`] when it is
    /// provided and central differences of the gradient otherwise.
    fn hvp_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>, vs: ArrayView2<T>) -> Array2<T> {
        if xs.nrows() == 0 {
            return Array2::zeros(xs.raw_dim());
        }
        let probe = self.hvp(
            &xs.row(0).to_vec(),
            &ys.row(0).to_vec(),
            &vs.row(0).to_vec(),
        );
        if probe.is_none() {
            return fd_hvp_batch(self, xs, ys, vs);
        }
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let h = self
                .hvp(&xs.row(i).to_vec(), &ys.row(i).to_vec(), &vs.row(i).to_vec())
                .expect("hvp availability is uniform");
            row.assign(&Array1::from(h));
        }
        out
    }
}

/// A density that can also be sampled exactly.
pub trait SampleableDensity<T: Real>: Density<T> {
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<T>;
}

/// Central-difference Hessian-vector product along `v/|v|` with step `1e-4 (1 + |x|)`.
pub fn fd_hvp_batch<T: Real, D: Density<T> + ?Sized>(
    d: &D,
    xs: ArrayView2<T>,
    ys: ArrayView2<T>,
    vs: ArrayView2<T>,
) -> Array2<T> {
    let n = xs.nrows();
    let mut plus = xs.to_owned();
    let mut minus = xs.to_owned();
    let mut scale = Array1::zeros(n);
    for i in 0..n {
        let v = vs.row(i);
        let vn = norm_sq(v.as_slice().unwrap_or(&v.to_vec())).sqrt();
        if vn == T::zero() {
            continue;
        }
        let xr = xs.row(i).to_vec();
        let h = T::lit(1e-4) * (T::one() + norm_sq(&xr).sqrt());
        for j in 0..xs.ncols() {
            let step = h * v[j] / vn;
            plus[[i, j]] += step;
            minus[[i, j]] -= step;
        }
        scale[i] = vn / (h + h);
    }
    let gp = d.grad_log_density_batch(plus.view(), ys);
    let gm = d.grad_log_density_batch(minus.view(), ys);
    (gp - gm) * scale.insert_axis(Axis(1))
}

/// Standard normal `N(0, I)` with normalizing constant included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StdGaussian {
    pub dim: usize,
}

impl StdGaussian {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl<T: Real> Density<T> for StdGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[T], _y: &[T]) -> T {
        let c = T::lit(-0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln());
        c - T::lit(0.5) * norm_sq(x)
    }

    fn grad_log_density(&self, x: &[T], _y: &[T]) -> Vec<T> {
        x.iter().map(|&v| -v).collect()
    }

    fn hvp(&self, _x: &[T], _y: &[T], v: &[T]) -> Option<Vec<T>> {
        Some(v.iter().map(|&a| -a).collect())
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>) -> Array1<T> {
        let c = T::lit(-0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln());
        xs.map_axis(Axis(1), |r| c - T::lit(0.5) * r.dot(&r))
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, _ys: ArrayView2<T>) -> Array2<T> {
        xs.mapv(|v| -v)
    }

    fn hvp_batch(&self, _xs: ArrayView2<T>, _ys: ArrayView2<T>, vs: ArrayView2<T>) -> Array2<T> {
        vs.mapv(|v| -v)
    }
}

impl<T: Real> SampleableDensity<T> for StdGaussian {
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<T> {
        Array2::from_shape_simple_fn((n, self.dim), || T::std_normal(rng))
    }
}

/// Geometric interpolation `(1 - w) log p_Z + w log p_X`; `p_Z` is unconditional.
pub struct Interpolated<'a, T: Real> {
    latent: &'a dyn Density<T>,
    target: Option<&'a dyn Density<T>>,
    w: T,
}

impl<'a, T: Real> Interpolated<'a, T> {
    /// `w` must lie in `[0, 1]`; a missing target is only allowed at `w = 0`.
    pub fn new(latent: &'a dyn Density<T>, target: Option<&'a dyn Density<T>>, w: T) -> Self {
        assert!(w >= T::zero() && w <= T::one(), "interpolation weight in [0, 1]");
        assert!(target.is_some() || w == T::zero(), "target required for w > 0");
        Self { latent, target, w }
    }

    pub fn weight(&self) -> T {
        self.w
    }

    fn parts(&self) -> (Option<T>, Option<(&'a dyn Density<T>, T)>) {
        let wl = (self.w < T::one()).then(|| T::one() - self.w);
        let wt = match self.target {
            Some(t) if self.w > T::zero() => Some((t, self.w)),
            _ => None,
        };
        (wl, wt)
    }

    fn empty_cond(n: usize) -> Array2<T> {
        Array2::zeros((n, 0))
    }
}

/// `p_t` for layer index `t` of a chain with `horizon` layers.
pub fn interpolated_density<'a, T: Real>(
    latent: &'a dyn Density<T>,
    target: Option<&'a dyn Density<T>>,
    t: usize,
    horizon: usize,
) -> Interpolated<'a, T> {
    assert!(horizon > 0 && t <= horizon, "interpolation index out of range");
    Interpolated::new(latent, target, T::lit(t as f64 / horizon as f64))
}

impl<T: Real> Density<T> for Interpolated<'_, T> {
    fn dim(&self) -> usize {
        self.latent.dim()
    }

    fn cond_dim(&self) -> usize {
        self.target.map_or(0, |t| t.cond_dim())
    }

    fn log_density(&self, x: &[T], y: &[T]) -> T {
        let (wl, wt) = self.parts();
        let mut v = T::zero();
        if let Some(a) = wl {
            v += a * self.latent.log_density(x, &[]);
        }
        if let Some((t, b)) = wt {
            v += b * t.log_density(x, y);
        }
        v
    }

    fn grad_log_density(&self, x: &[T], y: &[T]) -> Vec<T> {
        let (wl, wt) = self.parts();
        let mut g = vec![T::zero(); x.len()];
        if let Some(a) = wl {
            for (o, v) in g.iter_mut().zip(self.latent.grad_log_density(x, &[])) {
                *o += a * v;
            }
        }
        if let Some((t, b)) = wt {
            for (o, v) in g.iter_mut().zip(t.grad_log_density(x, y)) {
                *o += b * v;
            }
        }
        g
    }

    fn hvp(&self, x: &[T], y: &[T], v: &[T]) -> Option<Vec<T>> {
        let (wl, wt) = self.parts();
        let mut h = vec![T::zero(); x.len()];
        if let Some(a) = wl {
            for (o, e) in h.iter_mut().zip(self.latent.hvp(x, &[], v)?) {
                *o += a * e;
            }
        }
        if let Some((t, b)) = wt {
            for (o, e) in h.iter_mut().zip(t.hvp(x, y, v)?) {
                *o += b * e;
            }
        }
        Some(h)
    }

    fn log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array1<T> {
        let (wl, wt) = self.parts();
        let mut v = Array1::zeros(xs.nrows());
        if let Some(a) = wl {
            let e = Self::empty_cond(xs.nrows());
            v.scaled_add(a, &self.latent.log_density_batch(xs, e.view()));
        }
        if let Some((t, b)) = wt {
            v.scaled_add(b, &t.log_density_batch(xs, ys));
        }
        v
    }

    fn grad_log_density_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>) -> Array2<T> {
        let (wl, wt) = self.parts();
        let mut g = Array2::zeros(xs.raw_dim());
        if let Some(a) = wl {
            let e = Self::empty_cond(xs.nrows());
            g.scaled_add(a, &self.latent.grad_log_density_batch(xs, e.view()));
        }
        if let Some((t, b)) = wt {
            g.scaled_add(b, &t.grad_log_density_batch(xs, ys));
        }
        g
    }

    fn hvp_batch(&self, xs: ArrayView2<T>, ys: ArrayView2<T>, vs: ArrayView2<T>) -> Array2<T> {
        let (wl, wt) = self.parts();
        let mut h = Array2::zeros(xs.raw_dim());
        if let Some(a) = wl {
            let e = Self::empty_cond(xs.nrows());
            h.scaled_add(a, &self.latent.hvp_batch(xs, e.view(), vs));
        }
        if let Some((t, b)) = wt {
            h.scaled_add(b, &t.hvp_batch(xs, ys, vs));
        }
        h
    }
}

/// Largest relative deviation between `grad_log_density` and central
/// differences of `log_density` at `x`, with denominators floored at `floor`.
pub fn gradient_error<T: Real, D: Density<T> + ?Sized>(d: &D, x: &[T], y: &[T], h: T, floor: T) -> T {
    let g = d.grad_log_density(x, y);
    let mut worst = T::zero();
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fd = (d.log_density(&xp, y) - d.log_density(&xm, y)) / (h + h);
        worst = worst.max((fd - g[j]).abs() / fd.abs().max(floor));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Anisotropic Gaussian without an analytic hvp, to exercise the fallback.
    struct Quartic;

    impl Density<f64> for Quartic {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64], _y: &[f64]) -> f64 {
            -(x[0].powi(4) + x[0] * x[1] + 2.0 * x[1] * x[1])
        }
        fn grad_log_density(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
            vec![-(4.0 * x[0].powi(3) + x[1]), -(x[0] + 4.0 * x[1])]
        }
    }

    #[test]
    fn std_gaussian_normalized_value() {
        let d = StdGaussian::new(2);
        let v: f64 = d.log_density(&[0.0, 0.0], &[]);
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!(gradient_error(&d, &[0.3, -1.2], &[], 1e-5, 1e-3) < 1e-8);
    }

    #[test]
    fn fallback_hvp_matches_analytic_hessian() {
        let x = Array2::from_shape_vec((2, 2), vec![0.5, -0.2, -1.0, 2.0]).unwrap();
        let v = Array2::from_shape_vec((2, 2), vec![1.0, 0.3, 0.0, 0.0]).unwrap();
        let y = Array2::zeros((2, 0));
        let h = Quartic.hvp_batch(x.view(), y.view(), v.view());
        // H = -[[12 x0², 1], [1, 4]]
        let want0 = [-(12.0 * 0.25 * 1.0 + 0.3), -(1.0 + 4.0 * 0.3)];
        assert!((h[[0, 0]] - want0[0]).abs() < 1e-7);
        assert!((h[[0, 1]] - want0[1]).abs() < 1e-7);
        assert_eq!(h[[1, 0]], 0.0);
        assert_eq!(h[[1, 1]], 0.0);
    }

    #[test]
    fn interpolation_endpoints() {
        let z = StdGaussian::new(2);
        let x = [0.4, -0.3];
        let p0 = interpolated_density::<f64>(&z, Some(&Quartic), 0, 6);
        let p6 = interpolated_density::<f64>(&z, Some(&Quartic), 6, 6);
        assert_eq!(p0.log_density(&x, &[]), z.log_density(&x, &[]));
        assert_eq!(p6.log_density(&x, &[]), Quartic.log_density(&x, &[]));
        let p3 = interpolated_density::<f64>(&z, Some(&Quartic), 3, 6);
        let mid = 0.5 * Density::<f64>::log_density(&z, &x, &[]) + 0.5 * Quartic.log_density(&x, &[]);
        assert!((p3.log_density(&x, &[]) - mid).abs() < 1e-15);
        assert!(gradient_error(&p3, &x, &[], 1e-5, 1e-3) < 1e-7);
    }

    #[test]
    fn batch_matches_single() {
        let z = StdGaussian::new(2);
        let p = interpolated_density::<f64>(&z, Some(&Quartic), 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Array2<f64> = z.sample(5, &mut rng);
        let ys = Array2::zeros((5, 0));
        let lb = p.log_density_batch(xs.view(), ys.view());
        let gb = p.grad_log_density_batch(xs.view(), ys.view());
        for i in 0..5 {
            let x = xs.row(i).to_vec();
            assert!((lb[i] - p.log_density(&x, &[])).abs() < 1e-14);
            let g = p.grad_log_density(&x, &[]);
            assert!((gb[[i, 0]] - g[0]).abs() < 1e-14 && (gb[[i, 1]] - g[1]).abs() < 1e-14);
        }
    }
}
