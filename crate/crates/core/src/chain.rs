//! Chains of deterministic and stochastic layers, path sampling in both
//! directions, the KL path losses and their gradients, and training.
//!
//! Points are indexed `x_0, …, x_T` regardless of direction; layer `t`
//! (1-based) connects `x_{t-1}` and `x_t`. Every quotient term is stored in
//! forward orientation:
//!
//! * deterministic: `log|det ∇T_t(x_{t-1})|`
//! * MH / MALA: `log p_t(x_{t-1}) - log p_t(x_t)`
//! * Langevin: `½ (|η_t|² - |η̃_t|²)`, summed over the steps of the layer.
//!
//! Forward loss: `mean[log p_Z(x_0) - log p_X(x_T | y) - Σ terms]`.
//! Reverse loss: `mean[-log p_Z(x_0) + Σ terms]`. Both drop additive constants.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::codec;
use crate::density::{interpolated_density, Density, Interpolated, SampleableDensity};
use crate::error::{check_dim, Error, Result};
use crate::flow::ConditionalCouplingFlow;
use crate::kernels::{
    kernel_apply_batch, kernel_backward, kernel_replay_batch, layer_term, Direction, GradientMode, Kernel,
    KernelRecord,
};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Real> {
    Deterministic(ConditionalCouplingFlow<T>),
    /// `target_index` selects `p_t ∝ p_Z^{1 - t/T} p_X^{t/T}` with `T` the chain horizon.
    Stochastic { kernel: Kernel, target_index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain<T: Real> {
    dim: usize,
    cond_dim: usize,
    horizon: usize,
    layers: Vec<Layer<T>>,
}

/// Latent and target densities a chain runs against. The target is the
/// (conditional) posterior family; it may be omitted only for chains without
/// stochastic layers trained on reverse paths.
#[derive(Clone, Copy)]
pub struct ChainTargets<'a, T: Real> {
    pub latent: &'a dyn SampleableDensity<T>,
    pub target: Option<&'a dyn Density<T>>,
}

impl<'a, T: Real> ChainTargets<'a, T> {
    pub fn new(latent: &'a dyn SampleableDensity<T>, target: &'a dyn Density<T>) -> Self {
        Self {
            latent,
            target: Some(target),
        }
    }

    fn layer_density(&self, t: usize, horizon: usize) -> Result<Interpolated<'a, T>> {
        if t > 0 && self.target.is_none() {
            return Err(Error::Config(format!(
                "stochastic layer targets index {t} but no target density was supplied"
            )));
        }
        Ok(interpolated_density(self.latent, self.target, t, horizon))
    }

    fn target(&self) -> Result<&'a dyn Density<T>> {
        self.target.ok_or(Error::MissingNoiseModel)
    }
}

impl<T: Real> Chain<T> {
    /// `horizon` defaults to the number of layers.
    pub fn new(dim: usize, cond_dim: usize, layers: Vec<Layer<T>>, horizon: Option<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a chain needs at least one layer".into()));
        }
        let horizon = horizon.unwrap_or(layers.len());
        if horizon == 0 {
            return Err(Error::Config("interpolation horizon must be positive".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            match l {
                Layer::Deterministic(f) => {
                    check_dim("flow dim", dim, f.dim())?;
                    check_dim("flow condition dim", cond_dim, f.cond_dim())?;
                }
                Layer::Stochastic { kernel, target_index } => {
                    kernel.validate()?;
                    if *target_index > horizon {
                        return Err(Error::Config(format!(
                            "layer {} targets index {target_index} beyond horizon {horizon}",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(Self {
            dim,
            cond_dim,
            horizon,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn flows(&self) -> impl Iterator<Item = &ConditionalCouplingFlow<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Deterministic(f) => Some(f),
            _ => None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.flows().map(|f| f.num_params()).sum()
    }

    /// Flow parameters concatenated in layer order.
    pub fn params_flat(&self) -> Vec<T> {
        self.flows().flat_map(|f| f.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, p: &[T]) -> Result<()> {
        check_dim("chain parameters", self.num_params(), p.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            if let Layer::Deterministic(f) = l {
                let k = f.num_params();
                f.set_params_flat(&p[off..off + k])?;
                off += k;
            }
        }
        Ok(())
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                if let Layer::Deterministic(f) = l {
                    off += f.num_params();
                }
                o
            })
            .collect()
    }

    /// `"SNFC"`, dims, horizon, then per layer a tag (0 flow, 1 kernel).
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SNFC")?;
        codec::write_len(w, self.dim)?;
        codec::write_len(w, self.cond_dim)?;
        codec::write_len(w, self.horizon)?;
        codec::write_len(w, self.layers.len())?;
        for l in &self.layers {
            match l {
                Layer::Deterministic(f) => {
                    codec::write_u32(w, 0)?;
                    f.write_to(w)?;
                }
                Layer::Stochastic { kernel, target_index } => {
                    codec::write_u32(w, 1)?;
                    codec::write_str(w, &serde_json::to_string(kernel)?)?;
                    codec::write_len(w, *target_index)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read + ?Sized>(r: &mut R) -> Result<Self> {
        codec::expect_magic(r, b"SNFC")?;
        let dim = codec::read_len(r)?;
        let cond_dim = codec::read_len(r)?;
        let horizon = codec::read_len(r)?;
        let n = codec::read_len(r)?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            match codec::read_u32(r)? {
                0 => layers.push(Layer::Deterministic(ConditionalCouplingFlow::read_from(r)?)),
                1 => {
                    let kernel: Kernel = serde_json::from_str(&codec::read_str(r)?)?;
                    let target_index = codec::read_len(r)?;
                    layers.push(Layer::Stochastic { kernel, target_index });
                }
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            }
        }
        Self::new(dim, cond_dim, layers, Some(horizon))
    }
}

/// A batch of sampled paths with their quotient terms and frozen randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PathBatch<T: Real> {
    pub direction: Direction,
    /// `x_0, …, x_T`, each `n × d`.
    pub points: Vec<Array2<T>>,
    pub cond: Array2<T>,
    /// `n × T`, column `t - 1` holds layer `t`'s term.
    pub terms: Array2<T>,
    /// Stochastic-layer records, `None` for deterministic layers.
    pub records: Vec<Option<KernelRecord<T>>>,
}

impl<T: Real> PathBatch<T> {
    pub fn len(&self) -> usize {
        self.cond.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self) -> &Array2<T> {
        &self.points[0]
    }

    pub fn end(&self) -> &Array2<T> {
        self.points.last().expect("non-empty path")
    }

    pub fn term_sums(&self) -> Array1<T> {
        self.terms.sum_axis(Axis(1))
    }
}

fn ensure_finite<T: Real>(a: &Array2<T>, what: impl Fn() -> String) -> Result<()> {
    if let Some(i) = a.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("{} (batch row {i})", what())));
    }
    Ok(())
}

fn ensure_finite1<T: Real>(a: &Array1<T>, what: impl Fn() -> String) -> Result<()> {
    if let Some(i) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} (batch row {i})", what())));
    }
    Ok(())
}

enum Noise<'r, T: Real> {
    Draw(&'r mut dyn RngCore),
    Replay(&'r [Option<KernelRecord<T>>]),
}

fn run_path<T: Real>(
    chain: &Chain<T>,
    targets: &ChainTargets<'_, T>,
    start: Array2<T>,
    cond: ArrayView2<T>,
    dir: Direction,
    mut noise: Noise<'_, T>,
) -> Result<PathBatch<T>> {
    let n = start.nrows();
    check_dim("path start dim", chain.dim, start.ncols())?;
    check_dim("condition dim", chain.cond_dim, cond.ncols())?;
    check_dim("condition rows", n, cond.nrows())?;
    let nl = chain.len();
    let mut points: Vec<Option<Array2<T>>> = vec![None; nl + 1];
    let mut records: Vec<Option<KernelRecord<T>>> = vec![None; nl];
    let mut terms = Array2::zeros((n, nl));
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..nl).collect(),
        Direction::Reverse => (0..nl).rev().collect(),
    };
    let mut cur = start;
    let first = if dir == Direction::Forward { 0 } else { nl };
    points[first] = Some(cur.clone());
    for li in order {
        let t = li + 1;
        let (next, term) = match &chain.layers[li] {
            Layer::Deterministic(f) => match dir {
                Direction::Forward => f.forward_batch(cur.view(), cond)?,
                Direction::Reverse => {
                    let (z, ld) = f.inverse_batch(cur.view(), cond)?;
                    (z, -ld)
                }
            },
            Layer::Stochastic { kernel, target_index } => {
                let p = targets.layer_density(*target_index, chain.horizon)?;
                let rec = match &mut noise {
                    Noise::Draw(rng) => kernel_apply_batch(cur.view(), cond, &p, kernel, &mut **rng)?,
                    Noise::Replay(r) => {
                        let steps = r[li]
                            .as_ref()
                            .ok_or_else(|| Error::Config(format!("missing record for layer {t}")))?;
                        kernel_replay_batch(cur.view(), cond, &p, kernel, &steps.steps)?
                    }
                };
                let term = layer_term(kernel, &p, cond, &rec, dir);
                let out = rec.output().clone();
                records[li] = Some(rec);
                (out, term)
            }
        };
        ensure_finite(&next, || format!("layer {t} output"))?;
        ensure_finite1(&term, || format!("layer {t} quotient term"))?;
        terms.column_mut(li).assign(&term);
        let idx = if dir == Direction::Forward { t } else { li };
        points[idx] = Some(next.clone());
        cur = next;
    }
    Ok(PathBatch {
        direction: dir,
        points: points.into_iter().map(|p| p.expect("every point visited")).collect(),
        cond: cond.to_owned(),
        terms,
        records,
    })
}

/// `x_0 ~ p_Z`, then every layer in order. `cond` is `n × cond_dim`
/// (`n × 0` for unconditional chains).
pub fn sample_forward_path<T: Real>(
    chain: &Chain<T>,
    targets: &ChainTargets<'_, T>,
    cond: ArrayView2<T>,
    rng: &mut dyn RngCore,
) -> Result<PathBatch<T>> {
    check_dim("latent dim", chain.dim, targets.latent.dim())?;
    let x0 = targets.latent.sample(cond.nrows(), rng);
    run_path(chain, targets, x0, cond, Direction::Forward, Noise::Draw(rng))
}

/// `x_T = x`, then inverse flows and the same stochastic kernels down to `x_0`.
pub fn sample_reverse_path<T: Real>(
    chain: &Chain<T>,
    targets: &ChainTargets<'_, T>,
    x: ArrayView2<T>,
    cond: ArrayView2<T>,
    rng: &mut dyn RngCore,
) -> Result<PathBatch<T>> {
    run_path(chain, targets, x.to_owned(), cond, Direction::Reverse, Noise::Draw(rng))
}

/// Regenerates a path from its starting point with the stored randomness.
pub fn replay_path<T: Real>(
    chain: &Chain<T>,
    targets: &ChainTargets<'_, T>,
    path: &PathBatch<T>,
) -> Result<PathBatch<T>> {
    check_dim("recorded layers", chain.len(), path.records.len())?;
    let start = match path.direction {
        Direction::Forward => path.start().clone(),
        Direction::Reverse => path.end().clone(),
    };
    run_path(
        chain,
        targets,
        start,
        path.cond.view(),
        path.direction,
        Noise::Replay(&path.records),
    )
}

/// Per-path loss summands; their mean is [`kl_loss`].
pub fn path_losses<T: Real>(targets: &ChainTargets<'_, T>, path: &PathBatch<T>) -> Result<Array1<T>> {
    let e = Array2::zeros((path.len(), 0));
    let lz = targets.latent.log_density_batch(path.start().view(), e.view());
    let sums = path.term_sums();
    Ok(match path.direction {
        Direction::Forward => {
            let lx = targets.target()?.log_density_batch(path.end().view(), path.cond.view());
            lz - lx - sums
        }
        Direction::Reverse => sums - lz,
    })
}

pub fn kl_loss<T: Real>(targets: &ChainTargets<'_, T>, path: &PathBatch<T>) -> Result<T> {
    if path.is_empty() {
        return Err(Error::Empty);
    }
    let l = path_losses(targets, path)?;
    Ok(l.sum() / T::lit(path.len() as f64))
}

/// Loss and its gradient with respect to the chain parameters. Gradients flow
/// through flows by backpropagation and through stochastic layers by replaying
/// the stored randomness (see [`kernel_backward`]).
pub fn kl_loss_and_grad<T: Real>(
    chain: &Chain<T>,
    targets: &ChainTargets<'_, T>,
    path: &PathBatch<T>,
    mode: GradientMode,
) -> Result<(T, Vec<T>)> {
    let loss = kl_loss(targets, path)?;
    check_dim("recorded layers", chain.len(), path.records.len())?;
    let n = path.len();
    let inv_n = T::one() / T::lit(n as f64);
    let cond = path.cond.view();
    let offs = chain.param_offsets();
    let mut grads = vec![T::zero(); chain.num_params()];
    let e = Array2::zeros((n, 0));
    let nl = chain.len();
    match path.direction {
        Direction::Forward => {
            let w = -inv_n;
            let mut g = targets.target()?.grad_log_density_batch(path.end().view(), cond) * w;
            for li in (0..nl).rev() {
                let x_in = &path.points[li];
                g = match &chain.layers[li] {
                    Layer::Deterministic(f) => {
                        let (_, _, cache) = f.forward_cached(x_in.view(), cond)?;
                        let gld = Array1::from_elem(n, w);
                        let k = f.num_params();
                        f.backward_forward(&cache, g.view(), gld.view(), &mut grads[offs[li]..offs[li] + k])?
                    }
                    Layer::Stochastic { kernel, target_index } => {
                        let p = targets.layer_density(*target_index, chain.horizon)?;
                        let rec = path.records[li].as_ref().ok_or(Error::Empty)?;
                        kernel_backward(kernel, &p, cond, rec, g.view(), Some((w, Direction::Forward)), mode)
                    }
                };
            }
        }
        Direction::Reverse => {
            let w = inv_n;
            let mut g = targets.latent.grad_log_density_batch(path.start().view(), e.view()) * (-inv_n);
            for li in 0..nl {
                let x_in = &path.points[li + 1];
                g = match &chain.layers[li] {
                    Layer::Deterministic(f) => {
                        let (_, _, cache) = f.inverse_cached(x_in.view(), cond)?;
                        // term = -logdet_inv
                        let gld = Array1::from_elem(n, -w);
                        let k = f.num_params();
                        f.backward_inverse(&cache, g.view(), gld.view(), &mut grads[offs[li]..offs[li] + k])?
                    }
                    Layer::Stochastic { kernel, target_index } => {
                        let p = targets.layer_density(*target_index, chain.horizon)?;
                        let rec = path.records[li].as_ref().ok_or(Error::Empty)?;
                        kernel_backward(kernel, &p, cond, rec, g.view(), Some((w, Direction::Reverse)), mode)
                    }
                };
            }
        }
    }
    if grads.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the forward-path term; `0` trains on reverse paths only.
    pub lambda: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            batch: 512,
            steps: 2000,
            lr: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Combined loss per optimizer step.
    pub trace: Vec<f64>,
}

/// Source of training pairs `(x, y)`; `y` is `n × 0` for unconditional chains.
pub type DataSampler<'a, T> = dyn FnMut(usize, &mut dyn RngCore) -> (Array2<T>, Array2<T>) + 'a;

/// Adam on `λ · forward + (1 - λ) · reverse`. Forward paths reuse the `y`
/// half of each data batch as their conditions.
pub fn train<T: Real>(
    chain: &mut Chain<T>,
    targets: &ChainTargets<'_, T>,
    data: &mut DataSampler<'_, T>,
    cfg: &LossConfig,
    mode: GradientMode,
    rng: &mut dyn RngCore,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.lambda > 0.0 {
        targets.target()?;
    }
    if cfg.steps > 0 && chain.num_params() == 0 {
        return Err(Error::Config("training needs at least one deterministic layer".into()));
    }
    let lambda = T::lit(cfg.lambda);
    let mut params = chain.params_flat();
    let mut adam = AdamState::new(params.len(), T::lit(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (xs, ys) = data(cfg.batch, rng);
        let mut total = T::zero();
        let mut grad = vec![T::zero(); params.len()];
        let result: Result<()> = (|| {
            if cfg.lambda < 1.0 {
                let path = sample_reverse_path(chain, targets, xs.view(), ys.view(), rng)?;
                let (l, g) = kl_loss_and_grad(chain, targets, &path, mode)?;
                let c = T::one() - lambda;
                total += c * l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
            if cfg.lambda > 0.0 {
                let path = sample_forward_path(chain, targets, ys.view(), rng)?;
                let (l, g) = kl_loss_and_grad(chain, targets, &path, mode)?;
                total += lambda * l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += lambda * b);
            }
            Ok(())
        })();
        let loss = total.as_f64();
        let diverged = |trace: &Vec<f64>| Error::Diverged {
            step,
            loss,
            trace: trace.clone(),
        };
        match result {
            Ok(()) if loss.is_finite() => {}
            Ok(()) | Err(Error::NonFinite(_)) => return Err(diverged(&trace)),
            Err(e) => return Err(e),
        }
        trace.push(loss);
        if adam.step(&mut params, &grad).is_err() {
            return Err(diverged(&trace));
        }
        chain.set_params_flat(&params).map_err(|_| diverged(&trace))?;
    }
    Ok(TrainReport { trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::StdGaussian;
    use crate::flow::FlowConfig;
    use crate::kernels::{LangevinConfig, MhConfig, Proposal};
    use crate::problems::GaussianMixture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Shifted<'a>(&'a dyn Density<f64>, f64);

    impl Density<f64> for Shifted<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn cond_dim(&self) -> usize {
            self.0.cond_dim()
        }
        fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
            self.0.log_density(x, y) + self.1
        }
        fn grad_log_density(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
            self.0.grad_log_density(x, y)
        }
        fn hvp(&self, x: &[f64], y: &[f64], v: &[f64]) -> Option<Vec<f64>> {
            self.0.hvp(x, y, v)
        }
        fn log_density_batch(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Array1<f64> {
            self.0.log_density_batch(xs, ys) + self.1
        }
        fn grad_log_density_batch(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Array2<f64> {
            self.0.grad_log_density_batch(xs, ys)
        }
        fn hvp_batch(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>, vs: ArrayView2<f64>) -> Array2<f64> {
            self.0.hvp_batch(xs, ys, vs)
        }
    }

    fn target() -> GaussianMixture<f64> {
        let m = ndarray::arr2(&[[-0.6, 0.3], [0.7, -0.2]]);
        GaussianMixture::isotropic(&[0.5, 0.5], m, 0.15).unwrap()
    }

    fn flow(rng: &mut ChaCha8Rng, scale: f64) -> ConditionalCouplingFlow<f64> {
        let mut f = ConditionalCouplingFlow::new(&FlowConfig::new(2, 0, 2, vec![8]), rng).unwrap();
        let p: Vec<f64> = f.params_flat().iter().map(|v| v + scale * f64::std_normal(rng)).collect();
        f.set_params_flat(&p).unwrap();
        f
    }

    fn tiny_chain(rng: &mut ChaCha8Rng) -> Chain<f64> {
        let layers = vec![
            Layer::Deterministic(flow(rng, 0.3)),
            Layer::Stochastic {
                kernel: Kernel::Langevin(LangevinConfig { a1: 0.01, a2: 0.15, steps: 2 }),
                target_index: 2,
            },
            Layer::Stochastic {
                kernel: Kernel::Mh(MhConfig { proposal: Proposal::Mala { a1: 0.01, a2: 0.15 }, steps: 2 }),
                target_index: 3,
            },
            Layer::Deterministic(flow(rng, 0.3)),
        ];
        Chain::new(2, 0, layers, None).unwrap()
    }

    fn empty(n: usize) -> Array2<f64> {
        Array2::zeros((n, 0))
    }

    #[test]
    fn identity_flow_chain_has_zero_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = ConditionalCouplingFlow::new(&FlowConfig::new(2, 0, 1, vec![4]), &mut rng).unwrap();
        let mut f = f;
        f.stages_mut()[0].0 = crate::flow::Permutation::identity(2);
        let chain = Chain::new(2, 0, vec![Layer::Deterministic(f)], None).unwrap();
        let z = StdGaussian::new(2);
        let targets = ChainTargets { latent: &z, target: None };
        let p = sample_forward_path(&chain, &targets, empty(10).view(), &mut rng).unwrap();
        assert_eq!(p.points[0], p.points[1]);
        assert!(p.terms.iter().all(|&t| t == 0.0));
        let r = sample_reverse_path(&chain, &targets, p.points[1].view(), empty(10).view(), &mut rng).unwrap();
        assert_eq!(r.points[0], r.points[1]);
        assert!(r.terms.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn deterministic_reverse_path_is_exact_preimage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = Chain::new(
            2,
            0,
            vec![Layer::Deterministic(flow(&mut rng, 0.3)), Layer::Deterministic(flow(&mut rng, 0.3))],
            None,
        )
        .unwrap();
        let z = StdGaussian::new(2);
        let targets = ChainTargets { latent: &z, target: None };
        let fwd = sample_forward_path(&chain, &targets, empty(50).view(), &mut rng).unwrap();
        let rev = sample_reverse_path(&chain, &targets, fwd.end().view(), empty(50).view(), &mut rng).unwrap();
        for t in 0..3 {
            let d = (&fwd.points[t] - &rev.points[t]).mapv(f64::abs);
            assert!(d.iter().all(|&v| v < 1e-10));
        }
        let d = (&fwd.terms - &rev.terms).mapv(f64::abs);
        assert!(d.iter().all(|&v| v < 1e-10));
    }

    #[test]
    fn terms_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chain = tiny_chain(&mut rng);
        let z = StdGaussian::new(2);
        let gm = target();
        let targets = ChainTargets::new(&z, &gm);
        for dir in [Direction::Forward, Direction::Reverse] {
            let path = match dir {
                Direction::Forward => sample_forward_path(&chain, &targets, empty(20).view(), &mut rng).unwrap(),
                Direction::Reverse => {
                    let x = gm.sample(20, &mut rng);
                    sample_reverse_path(&chain, &targets, x.view(), empty(20).view(), &mut rng).unwrap()
                }
            };
            for i in 0..20 {
                let pt = |t: usize| path.points[t].row(i).to_vec();
                // layer 1 and 4: forward log-det at x_{t-1}
                for (li, layer) in chain.layers().iter().enumerate() {
                    let want = match layer {
                        Layer::Deterministic(f) => f.forward(&pt(li), &[]).unwrap().1,
                        Layer::Stochastic { kernel, target_index } => {
                            let p = interpolated_density::<f64>(&z, Some(&gm), *target_index, 4);
                            match kernel {
                                Kernel::Mh(_) => p.log_density(&pt(li), &[]) - p.log_density(&pt(li + 1), &[]),
                                Kernel::Langevin(c) => {
                                    let rec = path.records[li].as_ref().unwrap();
                                    let mut states: Vec<Vec<f64>> = rec.states.iter().map(|s| s.row(i).to_vec()).collect();
                                    if dir == Direction::Reverse {
                                        states.reverse();
                                    }
                                    let mut s = 0.0;
                                    for k in 0..states.len() - 1 {
                                        let (a, b) = (&states[k], &states[k + 1]);
                                        let (ga, gb) = (p.grad_log_density(a, &[]), p.grad_log_density(b, &[]));
                                        let mut e1 = 0.0;
                                        let mut e2 = 0.0;
                                        for j in 0..2 {
                                            let eta = (a[j] - b[j] + c.a1 * ga[j]) / c.a2;
                                            let eta_t = (a[j] - b[j] - c.a1 * gb[j]) / c.a2;
                                            e1 += eta * eta;
                                            e2 += eta_t * eta_t;
                                        }
                                        s += 0.5 * (e1 - e2);
                                    }
                                    s
                                }
                            }
                        }
                    };
                    let got = path.terms[[i, li]];
                    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{dir:?} layer {li}: {got} vs {want}");
                }
            }
        }
    }

    fn fd_check(dir: Direction, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chain = tiny_chain(&mut rng);
        let z = StdGaussian::new(2);
        let gm = target();
        let targets = ChainTargets::new(&z, &gm);
        let n = 8;
        let path = match dir {
            Direction::Forward => sample_forward_path(&chain, &targets, empty(n).view(), &mut rng).unwrap(),
            Direction::Reverse => {
                let x = gm.sample(n, &mut rng);
                sample_reverse_path(&chain, &targets, x.view(), empty(n).view(), &mut rng).unwrap()
            }
        };
        let (_, g) = kl_loss_and_grad(&chain, &targets, &path, GradientMode::Exact).unwrap();
        let p0 = chain.params_flat();
        let h = 1e-6;
        let mut fd = vec![0.0; p0.len()];
        for k in 0..p0.len() {
            let mut q = p0.clone();
            q[k] += h;
            chain.set_params_flat(&q).unwrap();
            let lp = kl_loss(&targets, &replay_path(&chain, &targets, &path).unwrap()).unwrap();
            q[k] -= 2.0 * h;
            chain.set_params_flat(&q).unwrap();
            let lm = kl_loss(&targets, &replay_path(&chain, &targets, &path).unwrap()).unwrap();
            fd[k] = (lp - lm) / (2.0 * h);
        }
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num <= 1e-4 * den, "{dir:?}: relative error {}", num / den);
    }

    #[test]
    fn reverse_gradient_matches_frozen_finite_differences() {
        fd_check(Direction::Reverse, 3);
    }

    #[test]
    fn forward_gradient_matches_frozen_finite_differences() {
        fd_check(Direction::Forward, 4);
    }

    #[test]
    fn shifting_log_densities_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chain = tiny_chain(&mut rng);
        let z = StdGaussian::new(2);
        let gm = target();
        let shifted = Shifted(&gm, 123.456);
        let a = ChainTargets::new(&z, &gm);
        let b = ChainTargets::new(&z, &shifted);
        let x = gm.sample(32, &mut rng);
        let path = sample_reverse_path(&chain, &a, x.view(), empty(32).view(), &mut rng).unwrap();
        let (la, ga) = kl_loss_and_grad(&chain, &a, &path, GradientMode::Exact).unwrap();
        let pb = replay_path(&chain, &b, &path).unwrap();
        let (lb, gb) = kl_loss_and_grad(&chain, &b, &pb, GradientMode::Exact).unwrap();
        assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
        for (u, v) in ga.iter().zip(&gb) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn serialized_path_replays_to_identical_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chain = tiny_chain(&mut rng);
        let z = StdGaussian::new(2);
        let gm = target();
        let t = ChainTargets::new(&z, &gm);
        let path = sample_forward_path(&chain, &t, empty(16).view(), &mut rng).unwrap();
        let json = serde_json::to_string(&path).unwrap();
        let back: PathBatch<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, path);
        let again = replay_path(&chain, &t, &back).unwrap();
        assert_eq!(again, path);
        assert_eq!(kl_loss(&t, &again).unwrap(), kl_loss(&t, &path).unwrap());
    }

    #[test]
    fn matched_identity_chain_reverse_loss_is_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = ConditionalCouplingFlow::new(&FlowConfig::new(2, 0, 1, vec![4]), &mut rng).unwrap();
        let chain = Chain::new(2, 0, vec![Layer::Deterministic(f)], None).unwrap();
        let z = StdGaussian::new(2);
        let t = ChainTargets::new(&z, &z);
        let n = 20_000;
        let x = z.sample(n, &mut rng);
        let path = sample_reverse_path(&chain, &t, x.view(), empty(n).view(), &mut rng).unwrap();
        let (l, g) = kl_loss_and_grad(&chain, &t, &path, GradientMode::Exact).unwrap();
        let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
        assert!((l - entropy).abs() < 4.0 * (1.0 / n as f64).sqrt());
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gn < 0.1, "{gn}");
    }

    #[test]
    fn forward_loss_without_target_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chain = Chain::new(2, 0, vec![Layer::Deterministic(flow(&mut rng, 0.1))], None).unwrap();
        let z = StdGaussian::new(2);
        let t = ChainTargets { latent: &z, target: None };
        let path = sample_forward_path(&chain, &t, empty(4).view(), &mut rng).unwrap();
        assert!(matches!(kl_loss(&t, &path), Err(Error::MissingNoiseModel)));
    }

    #[test]
    fn invalid_target_index_rejected() {
        let k = Kernel::Langevin(LangevinConfig { a1: 0.1, a2: 0.1, steps: 1 });
        let r = Chain::<f64>::new(2, 0, vec![Layer::Stochastic { kernel: k, target_index: 7 }], Some(6));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_leave_chain_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut chain = tiny_chain(&mut rng);
        let before = chain.clone();
        let z = StdGaussian::new(2);
        let gm = target();
        let t = ChainTargets::new(&z, &gm);
        let cfg = LossConfig { steps: 0, ..LossConfig::default() };
        let mut data = |n: usize, r: &mut dyn RngCore| (gm.sample(n, r), empty(n));
        let rep = train(&mut chain, &t, &mut data, &cfg, GradientMode::Exact, &mut rng).unwrap();
        assert!(rep.trace.is_empty());
        assert_eq!(chain, before);
    }

    #[test]
    fn gaussian_to_gaussian_training_recovers_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cov = ndarray::arr2(&[[0.5, 0.2], [0.2, 0.3]]);
        let mean = [1.0, -0.5];
        let tgt = GaussianMixture::new(&[1.0], ndarray::arr2(&[mean]), vec![cov.clone()]).unwrap();
        let f = ConditionalCouplingFlow::new(&FlowConfig::new(2, 0, 2, vec![16]), &mut rng).unwrap();
        let mut chain = Chain::new(2, 0, vec![Layer::Deterministic(f)], None).unwrap();
        let z = StdGaussian::new(2);
        let t = ChainTargets::new(&z, &tgt);
        let cfg = LossConfig { lambda: 0.0, batch: 512, steps: 1500, lr: 3e-3 };
        let mut data = |n: usize, r: &mut dyn RngCore| (tgt.sample(n, r), empty(n));
        let rep = train(&mut chain, &t, &mut data, &cfg, GradientMode::Exact, &mut rng).unwrap();
        let head: f64 = rep.trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = rep.trace[rep.trace.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < head);
        let entropy = 0.5 * ((2.0 * std::f64::consts::PI * std::f64::consts::E).powi(2) * (0.5 * 0.3 - 0.04)).ln();
        assert!((tail - entropy).abs() < 0.03, "{tail} vs {entropy}");
        let n = 40_000;
        let p = sample_forward_path(&chain, &t, empty(n).view(), &mut rng).unwrap();
        let x = p.end();
        let m = x.mean_axis(Axis(0)).unwrap();
        let c = (x - &m).t().dot(&(x - &m)) / n as f64;
        for j in 0..2 {
            assert!((m[j] - mean[j]).abs() < 0.1 * cov[[j, j]].sqrt(), "{m}");
            for l in 0..2 {
                assert!((c[[j, l]] - cov[[j, l]]).abs() < 0.1 * cov[[j, j]], "{c}");
            }
        }
    }

    #[test]
    fn chain_serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chain = tiny_chain(&mut rng);
        let mut buf = Vec::new();
        chain.write_to(&mut buf).unwrap();
        assert_eq!(Chain::<f64>::read_from(&mut buf.as_slice()).unwrap(), chain);
    }
}
