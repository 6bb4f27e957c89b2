//! Sample-based evaluation: exact Wasserstein-1, binned KL, the MH reference
//! sampler and the per-observation evaluation loop.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::chain::{sample_forward_path, Chain, ChainTargets};
use crate::density::{Density, SampleableDensity};
use crate::error::{check_dim, Error, Result};
use crate::kernels::{kernel_run_batch, Kernel, MhConfig, Proposal};
use crate::scalar::Real;

pub mod assignment;
pub mod histogram;
pub mod transport;

pub use assignment::{solve_assignment, Assignment};
pub use histogram::{binned_kl, binned_kl_points, BinnedKl, CubeGrid, CubeHistogram};
pub use transport::{solve_transport, TransportPlan};

pub const DEFAULT_W1_CAP: usize = 2000;

/// Points in `R^d` with optional positive weights (uniform when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    points: Array2<f64>,
    weights: Option<Vec<f64>>,
}

impl SampleCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample cloud coordinates".into()));
        }
        Ok(Self { points, weights: None })
    }

    pub fn weighted(points: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        check_dim("cloud weights", points.nrows(), weights.len())?;
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("cloud weights must be positive".into()));
        }
        let mut c = Self::new(points)?;
        c.weights = Some(weights);
        Ok(c)
    }

    pub fn from_real<T: Real>(points: ArrayView2<T>) -> Result<Self> {
        Self::new(points.mapv(T::as_f64))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    fn masses(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.len()])
    }
}

fn euclidean_costs(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    for (i, x) in a.outer_iter().enumerate() {
        for (j, y) in b.outer_iter().enumerate() {
            c[[i, j]] = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    c
}

/// Exact W1 with Euclidean ground cost, refusing clouds above [`DEFAULT_W1_CAP`].
pub fn wasserstein1(a: &SampleCloud, b: &SampleCloud) -> Result<f64> {
    wasserstein1_capped(a, b, DEFAULT_W1_CAP)
}

/// Equal-size uniform clouds are solved as an assignment problem; anything
/// else goes through the transportation simplex.
pub fn wasserstein1_capped(a: &SampleCloud, b: &SampleCloud, cap: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty);
    }
    check_dim("cloud dimension", a.dim(), b.dim())?;
    let size = a.len().max(b.len());
    if size > cap {
        return Err(Error::TooLarge { size, cap });
    }
    let c = euclidean_costs(&a.points, &b.points);
    if a.len() == b.len() && a.weights.is_none() && b.weights.is_none() {
        Ok(solve_assignment(c.view())?.cost / a.len() as f64)
    } else {
        Ok(solve_transport(&a.masses(), &b.masses(), c.view())?.cost)
    }
}

/// Average of exact W1 over `reps` uniform subsamples of at most `size`
/// points from each (unweighted) cloud.
pub fn wasserstein1_subsampled(
    a: &SampleCloud,
    b: &SampleCloud,
    size: usize,
    reps: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if a.weights.is_some() || b.weights.is_some() {
        return Err(Error::NotApplicable("subsampling weighted clouds".into()));
    }
    if reps == 0 || size == 0 {
        return Err(Error::Config("subsample size and repetitions must be positive".into()));
    }
    let sub = |c: &SampleCloud, rng: &mut dyn RngCore| -> Result<SampleCloud> {
        let k = size.min(c.len());
        let idx = sample_indices(rng, c.len(), k).into_vec();
        SampleCloud::new(c.points.select(Axis(0), &idx))
    };
    let mut total = 0.0;
    for _ in 0..reps {
        let sa = sub(a, rng)?;
        let sb = sub(b, rng)?;
        total += wasserstein1_capped(&sa, &sb, size.max(1))?;
    }
    Ok(total / reps as f64)
}

/// Reference sampler: one independent MH chain per row of `x0`, run for
/// `n_steps` steps; returns the final states.
pub fn mh_baseline<T: Real>(
    target: &dyn Density<T>,
    x0: ArrayView2<T>,
    ys: ArrayView2<T>,
    n_steps: usize,
    proposal: Proposal,
    rng: &mut dyn RngCore,
) -> Result<Array2<T>> {
    let kernel = Kernel::Mh(MhConfig { proposal, steps: n_steps });
    kernel.validate()?;
    Ok(kernel_run_batch(x0, ys, target, &kernel, rng)?.0)
}

/// `n` draws of `x_T` from `chain` conditioned on `y`.
pub fn sample_chain_posterior<T: Real>(
    chain: &Chain<T>,
    latent: &dyn SampleableDensity<T>,
    posterior: Option<&dyn Density<T>>,
    y: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    check_dim("observation", chain.cond_dim(), y.len())?;
    let cond = Array2::from_shape_fn((n, y.len()), |(_, j)| T::lit(y[j]));
    let targets = ChainTargets { latent, target: posterior };
    let path = sample_forward_path(chain, &targets, cond.view(), rng)?;
    Ok(path.end().mapv(T::as_f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Metric {
    Wasserstein1 { cap: usize },
    BinnedKl { grid: CubeGrid },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Wasserstein1 { .. } => "w1",
            Metric::BinnedKl { .. } => "binned_kl",
        }
    }

    /// Metric value and, for binned KL, the reference coverage.
    /// `reference` comes first: binned KL is `KL(reference ‖ candidate)`.
    pub fn compute(&self, reference: ArrayView2<f64>, candidate: ArrayView2<f64>) -> Result<(f64, Option<f64>)> {
        match *self {
            Metric::Wasserstein1 { cap } => {
                let a = SampleCloud::new(reference.to_owned())?;
                let b = SampleCloud::new(candidate.to_owned())?;
                Ok((wasserstein1_capped(&a, &b, cap)?, None))
            }
            Metric::BinnedKl { grid } => {
                let k = binned_kl_points(reference, candidate, grid)?;
                Ok((k.kl, Some(k.coverage)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: Metric,
    pub samples: usize,
    /// Also measure the metric between two independent reference draws.
    pub noise_floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YMetric {
    pub index: usize,
    pub value: f64,
    pub floor: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub rows: Vec<YMetric>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl EvalReport {
    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    pub fn floors(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.floor).collect()
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.values())
    }

    pub fn floor_mean_std(&self) -> Option<(f64, f64)> {
        let f = self.floors();
        (!f.is_empty()).then(|| mean_std(&f))
    }

    /// `y_index,metric,value` rows followed by `mean` and `std` aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("y_index,metric,value\n");
        let floor_name = format!("{}_floor", self.metric);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.index, self.metric, r.value);
            if let Some(f) = r.floor {
                let _ = writeln!(s, "{},{},{}", r.index, floor_name, f);
            }
            if let Some(c) = r.coverage {
                let _ = writeln!(s, "{},coverage,{}", r.index, c);
            }
        }
        let (m, sd) = self.mean_std();
        let _ = writeln!(s, "mean,{},{m}", self.metric);
        let _ = writeln!(s, "std,{},{sd}", self.metric);
        if let Some((fm, fs)) = self.floor_mean_std() {
            let _ = writeln!(s, "mean,{floor_name},{fm}");
            let _ = writeln!(s, "std,{floor_name},{fs}");
        }
        s
    }
}

/// `(y, n, rng) -> n × d` samples.
pub type Sampler<'a> = dyn FnMut(&[f64], usize, &mut dyn RngCore) -> Result<Array2<f64>> + 'a;

/// For every `y`: draw model and reference samples, compute the metric and
/// optionally the reference-vs-reference noise floor.
pub fn evaluate_run(
    model: &mut Sampler<'_>,
    reference: &mut Sampler<'_>,
    ys: &[Vec<f64>],
    cfg: &EvalConfig,
    rng: &mut dyn RngCore,
) -> Result<EvalReport> {
    let mut reports = evaluate_models(&mut [model], reference, ys, cfg, rng)?;
    Ok(reports.remove(0))
}

/// [`evaluate_run`] for several models scored against the same reference
/// clouds, one report per model.
pub fn evaluate_models(
    models: &mut [&mut Sampler<'_>],
    reference: &mut Sampler<'_>,
    ys: &[Vec<f64>],
    cfg: &EvalConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<EvalReport>> {
    if cfg.samples == 0 {
        return Err(Error::Config("evaluation needs at least one sample per y".into()));
    }
    let mut rows = vec![Vec::with_capacity(ys.len()); models.len()];
    for (index, y) in ys.iter().enumerate() {
        let xr = reference(y, cfg.samples, rng)?;
        let floor = if cfg.noise_floor {
            let xr2 = reference(y, cfg.samples, rng)?;
            Some(cfg.metric.compute(xr.view(), xr2.view())?.0)
        } else {
            None
        };
        for (model, out) in models.iter_mut().zip(rows.iter_mut()) {
            let xm = model(y, cfg.samples, rng)?;
            let (value, coverage) = cfg.metric.compute(xr.view(), xm.view())?;
            out.push(YMetric { index, value, floor, coverage });
        }
    }
    Ok(rows
        .into_iter()
        .map(|rows| EvalReport {
            metric: cfg.metric.name().to_string(),
            rows,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::StdGaussian;
    use crate::problems::GaussianMixture;
    use ndarray::{arr2, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_w1(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let c = euclidean_costs(a, b);
        let n = a.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        fn heap(k: usize, p: &mut Vec<usize>, c: &Array2<f64>, best: &mut f64) {
            if k == 1 {
                let v: f64 = p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
                *best = best.min(v);
                return;
            }
            for i in 0..k {
                heap(k - 1, p, c, best);
                if k % 2 == 0 {
                    p.swap(i, k - 1);
                } else {
                    p.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut perm, &c, &mut best);
        best / n as f64
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn w1_matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=7 {
            for _ in 0..5 {
                let a = cloud(&mut rng, n, 3);
                let b = cloud(&mut rng, n, 3);
                let w = wasserstein1(&SampleCloud::new(a.clone()).unwrap(), &SampleCloud::new(b.clone()).unwrap()).unwrap();
                assert!((w - brute_w1(&a, &b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn w1_crossing_pairs() {
        let a = arr2(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = arr2(&[[1.0, 1.0], [0.0, 1.0]]);
        let w = wasserstein1(&SampleCloud::new(a).unwrap(), &SampleCloud::new(b).unwrap()).unwrap();
        // vertical pairs cost 1 each, the diagonal pairs sqrt 2 each
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_one_dimensional_sorted_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 5, 50, 300] {
            let a = cloud(&mut rng, n, 1);
            let b = cloud(&mut rng, n, 1);
            let mut sa: Vec<f64> = a.iter().copied().collect();
            let mut sb: Vec<f64> = b.iter().copied().collect();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            let want = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
            let got = wasserstein1(&SampleCloud::new(a).unwrap(), &SampleCloud::new(b).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn w1_unequal_sizes_use_transport() {
        let a = arr2(&[[0.0], [1.0]]);
        let b = arr2(&[[0.0], [0.5], [1.0]]);
        let w = wasserstein1(&SampleCloud::new(a).unwrap(), &SampleCloud::new(b).unwrap()).unwrap();
        // F_a - F_b is 1/6 on [0, 0.5) and -1/6 on [0.5, 1)
        assert!((w - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn w1_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = SampleCloud::new(cloud(&mut rng, 30, 2)).unwrap();
        assert!(matches!(wasserstein1_capped(&big, &big, 20), Err(Error::TooLarge { size: 30, cap: 20 })));
        let empty = SampleCloud::new(Array2::zeros((0, 2))).unwrap();
        assert!(matches!(wasserstein1(&empty, &big), Err(Error::Empty)));
        assert!(SampleCloud::new(arr2(&[[f64::NAN]])).is_err());
    }

    #[test]
    fn subsampled_w1_of_identical_small_clouds_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = SampleCloud::new(cloud(&mut rng, 10, 2)).unwrap();
        let w = wasserstein1_subsampled(&a, &a, 10, 3, &mut rng).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn mh_baseline_zero_steps_returns_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = StdGaussian::new(2);
        let x0 = cloud(&mut rng, 5, 2);
        let out = mh_baseline(&z, x0.view(), Array2::zeros((5, 0)).view(), 0, Proposal::RandomWalk { sigma: 0.5 }, &mut rng)
            .unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn mh_baseline_reaches_gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = GaussianMixture::<f64>::isotropic(&[1.0], arr2(&[[0.7]]), 0.25).unwrap();
        let n = 10_000;
        let x0 = Array2::from_elem((n, 1), -3.0);
        let out = mh_baseline(&target, x0.view(), Array2::zeros((n, 0)).view(), 1000, Proposal::RandomWalk { sigma: 0.8 }, &mut rng)
            .unwrap();
        let col: Array1<f64> = out.column(0).to_owned();
        let m = col.mean().unwrap();
        let v = col.var(1.0);
        let se_m = (0.25 / n as f64).sqrt();
        let se_v = 0.25 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((m - 0.7).abs() < 3.0 * se_m, "mean {m}");
        assert!((v - 0.25).abs() < 3.0 * se_v, "var {v}");
    }

    #[test]
    fn exact_model_sits_at_the_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gm = GaussianMixture::<f64>::isotropic(&[0.5, 0.5], arr2(&[[-1.0, 0.0], [1.0, 0.5]]), 0.1).unwrap();
        let mut exact = |_: &[f64], n: usize, r: &mut dyn RngCore| Ok(gm.sample(n, r));
        let mut reference = |_: &[f64], n: usize, r: &mut dyn RngCore| Ok(gm.sample(n, r));
        let ys = vec![vec![]; 6];
        let cfg = EvalConfig { metric: Metric::Wasserstein1 { cap: 2000 }, samples: 300, noise_floor: true };
        let rep = evaluate_run(&mut exact, &mut reference, &ys, &cfg, &mut rng).unwrap();
        let (m, _) = rep.mean_std();
        let (f, fs) = rep.floor_mean_std().unwrap();
        assert!((m - f).abs() < 3.0 * fs.max(0.01), "{m} vs floor {f}");
        let csv = rep.to_csv();
        assert!(csv.starts_with("y_index,metric,value\n0,w1,"));
        assert!(csv.contains("\nmean,w1,") && csv.contains("\nstd,w1_floor,"));
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
