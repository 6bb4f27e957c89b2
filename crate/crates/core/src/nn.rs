//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters are flattened layer-major, weights (row-major `out x in`) before
//! biases. That ordering is used by the optimizer, by serialization and by the
//! finite-difference tests.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 1,
            Activation::Identity => 0,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_at_output<T: Real>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T> {
    sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
}

/// Per-layer activations of a batched forward pass, `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct NetCache<T> {
    acts: Vec<Array2<T>>,
}

impl<T: Real> NetCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.acts.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T> {
    pub grad_input: Vec<T>,
    pub grad_params: Vec<T>,
}

impl<T: Real> DenseNet<T> {
    /// All-zero network with the given layer sizes.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let weights = sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// Fan-in scaled Gaussian weights `N(0, 1/fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        for w in &mut net.weights {
            let scale = T::lit(1.0 / (w.ncols() as f64).sqrt());
            w.mapv_inplace(|_| T::std_normal(rng) * scale);
        }
        Ok(net)
    }

    pub fn init_seeded(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::init(sizes, activation, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Zeroes the last affine layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        self.weights.last_mut().expect("layer").fill(T::zero());
        self.biases.last_mut().expect("layer").fill(T::zero());
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn weight(&self, layer: usize) -> &Array2<T> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array1<T> {
        &self.biases[layer]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim("net_forward input", self.input_dim(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward_batch(view).into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass on an `n x input_dim` batch.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.input_dim(), "net input width");
        let last = self.num_layers() - 1;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            if l < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> NetCache<T> {
        assert_eq!(x.ncols(), self.input_dim(), "net input width");
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            acts.push(z);
        }
        NetCache { acts }
    }

    /// Reverse pass for a cached batch. Parameter gradients (summed over the
    /// batch) are *added* into `grad_params`; input gradients are returned.
    pub fn backward_batch(
        &self,
        cache: &NetCache<T>,
        upstream: ArrayView2<T>,
        grad_params: &mut [T],
    ) -> Array2<T> {
        assert_eq!(grad_params.len(), self.num_params(), "gradient buffer");
        assert_eq!(upstream.ncols(), self.output_dim(), "upstream width");
        let last = self.num_layers() - 1;
        let offsets = self.layer_offsets();
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            if l < last {
                let act = self.activation;
                delta.zip_mut_with(&cache.acts[l + 1], |d, &a| {
                    *d *= act.derivative_at_output(a)
                });
            }
            let gw = delta.t().dot(&cache.acts[l]);
            let (rows, cols) = gw.dim();
            let off = offsets[l];
            let wslice = &mut grad_params[off..off + rows * cols];
            for (g, &v) in wslice.iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            let bslice = &mut grad_params[off + rows * cols..off + rows * cols + rows];
            for (g, &v) in bslice.iter_mut().zip(gb.iter()) {
                *g += v;
            }
            delta = delta.dot(&self.weights[l]);
        }
        delta
    }

    /// Input gradients only; skips the parameter products.
    pub fn backward_input_batch(&self, cache: &NetCache<T>, upstream: ArrayView2<T>) -> Array2<T> {
        assert_eq!(upstream.ncols(), self.output_dim(), "upstream width");
        let last = self.num_layers() - 1;
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            if l < last {
                let act = self.activation;
                delta.zip_mut_with(&cache.acts[l + 1], |d, &a| {
                    *d *= act.derivative_at_output(a)
                });
            }
            delta = delta.dot(&self.weights[l]);
        }
        delta
    }

    /// Single-sample vector-Jacobian products for input and parameters.
    pub fn backward(&self, x: &[T], upstream: &[T]) -> Result<GradBundle<T>> {
        check_dim("net_backward input", self.input_dim(), x.len())?;
        check_dim("net_backward upstream", self.output_dim(), upstream.len())?;
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let uv = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row");
        let cache = self.forward_cached(xv);
        let mut grad_params = vec![T::zero(); self.num_params()];
        let gi = self.backward_batch(&cache, uv, &mut grad_params);
        Ok(GradBundle {
            grad_input: gi.into_raw_vec_and_offset().0,
            grad_params,
        })
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let o = off;
                off += w[0] * w[1] + w[1];
                o
            })
            .collect()
    }

    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    pub(crate) fn write_params(&self, out: &mut Vec<T>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
    }

    pub fn set_params_flat(&mut self, params: &[T]) -> Result<()> {
        check_dim("set_params_flat", self.num_params(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.iter_mut() {
                *v = params[off];
                off += 1;
            }
            for v in b.iter_mut() {
                *v = params[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Binary layout: `"SNFN"`, activation tag, layer sizes, flat parameters.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SNFN")?;
        codec::write_u32(w, self.activation.tag())?;
        codec::write_len(w, self.sizes.len())?;
        for &s in &self.sizes {
            codec::write_len(w, s)?;
        }
        codec::write_reals(w, &self.params_flat())
    }

    pub fn read_from<R: Read + ?Sized>(r: &mut R) -> Result<Self> {
        codec::expect_magic(r, b"SNFN")?;
        let activation = Activation::from_tag(codec::read_u32(r)?)?;
        let n = codec::read_len(r)?;
        let sizes = (0..n)
            .map(|_| codec::read_len(r))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&sizes, activation)?;
        let params = codec::read_reals::<T, _>(r)?;
        net.set_params_flat(&params)?;
        Ok(net)
    }
}

/// Sum of squared errors over a batch and its parameter gradient.
pub(crate) fn squared_error_grad<T: Real>(
    net: &DenseNet<T>,
    x: ArrayView2<T>,
    target: ArrayView2<T>,
    grad: &mut [T],
) -> T {
    let cache = net.forward_cached(x);
    let diff = cache.output() - &target;
    let loss = diff.iter().map(|&d| d * d).sum::<T>();
    let upstream = diff.mapv(|d| d + d);
    net.backward_batch(&cache, upstream.view(), grad);
    loss
}
