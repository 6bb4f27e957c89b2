use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{check_dim, Error, Result};
use crate::nn::{squared_error_grad, Activation, DenseNet};
use crate::scalar::Real;

/// A fixed seeded smooth map `ℝ^d → ℝ^m`: one tanh layer of width `hidden`,
/// input weights doubled, output weights scaled by `gain` and output offset 1
/// so values stay away from 0. Smaller `gain` means a less informative map.
pub fn synthetic_forward_map<T: Real>(d: usize, m: usize, hidden: usize, gain: f64, seed: u64) -> Result<DenseNet<T>> {
    let mut net = DenseNet::<T>::init_seeded(&[d, hidden, m], Activation::Tanh, seed)?;
    let mut p = net.params_flat();
    let n_w0 = d * hidden;
    for v in &mut p[..n_w0] {
        *v *= T::lit(2.0);
    }
    let off = n_w0 + hidden;
    for v in &mut p[off..off + hidden * m] {
        *v *= T::lit(gain);
    }
    let off = off + hidden * m;
    for v in &mut p[off..] {
        *v = T::one();
    }
    net.set_params_flat(&p)?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of samples held out for the reported test error.
    pub holdout: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            epochs: 200,
            batch: 128,
            lr: 1e-3,
            holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub train_rmse: f64,
    pub heldout_rmse: f64,
}

fn rmse<T: Real>(net: &DenseNet<T>, x: ArrayView2<T>, f: ArrayView2<T>) -> f64 {
    if x.nrows() == 0 {
        return f64::NAN;
    }
    let d = net.forward_batch(x) - f;
    (d.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

/// Least-squares fit of a tanh network to `(x_i, F(x_i))` pairs with Adam.
pub fn surrogate_fit<T: Real>(
    xs: ArrayView2<T>,
    fs: ArrayView2<T>,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<(DenseNet<T>, SurrogateReport)> {
    check_dim("surrogate pairs", xs.nrows(), fs.nrows())?;
    if !(0.0..1.0).contains(&cfg.holdout) || cfg.batch == 0 {
        return Err(Error::Config("holdout must be in [0, 1) and batch positive".into()));
    }
    let n = xs.nrows();
    let n_test = (n as f64 * cfg.holdout).round() as usize;
    let n_train = n - n_test;
    if n_train == 0 {
        return Err(Error::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train, test) = order.split_at(n_train);
    let xt = xs.select(Axis(0), train);
    let ft = fs.select(Axis(0), train);
    let xh = xs.select(Axis(0), test);
    let fh = fs.select(Axis(0), test);

    let mut sizes = vec![xs.ncols()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(fs.ncols());
    let mut net = DenseNet::init(&sizes, Activation::Tanh, &mut rng)?;
    let mut params = net.params_flat();
    let mut adam = AdamState::new(params.len(), T::lit(cfg.lr));
    let mut idx: Vec<usize> = (0..n_train).collect();
    let mut grad = vec![T::zero(); params.len()];
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch) {
            let xb = xt.select(Axis(0), chunk);
            let fb = ft.select(Axis(0), chunk);
            grad.iter_mut().for_each(|g| *g = T::zero());
            squared_error_grad(&net, xb.view(), fb.view(), &mut grad);
            let scale = T::one() / T::lit(chunk.len() as f64);
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut params, &grad)?;
            net.set_params_flat(&params)?;
        }
    }
    let report = SurrogateReport {
        train_rmse: rmse(&net, xt.view(), ft.view()),
        heldout_rmse: rmse(&net, xh.view(), fh.view()),
    };
    Ok((net, report))
}

/// `n` points uniform on `[-1, 1]^d`.
pub fn uniform_box<T: Real, R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((n, d), || T::lit(rng.random_range(-1.0..=1.0)))
}
