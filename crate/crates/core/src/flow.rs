//! Affine coupling blocks and conditional coupling flows.
//!
//! A block splits `ξ = (ξ₁, ξ₂)` with `d₁ = ⌈d/2⌉` and applies
//!
//! ```text
//! x₁ = ξ₁ ⊙ exp(s₂(ξ₂, y)) + t₂(ξ₂, y)
//! x₂ = ξ₂ ⊙ exp(s₁(x₁, y)) + t₁(x₁, y)
//! ```
//!
//! so `log|det ∇T| = sum s₂ + sum s₁`. The condition `y` is appended to every
//! subnetwork input and never enters the invertible path. Raw scale outputs go
//! through `c·tanh(r/c)` when a clamp `c` is set. A flow is
//! `T_L ∘ P_L ∘ … ∘ T_1 ∘ P_1` with fixed permutations `P_l`.

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, DenseNet, NetCache};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(Error::Config(format!("{perm:?} is not a permutation")));
            }
            inv[p] = i;
        }
        Ok(Self { perm, inv })
    }

    pub fn identity(d: usize) -> Self {
        Self::new((0..d).collect()).expect("identity")
    }

    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut p: Vec<usize> = (0..d).collect();
        p.shuffle(rng);
        Self::new(p).expect("shuffled")
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `out[:, i] = x[:, perm[i]]`.
    pub fn apply<T: Real>(&self, x: ArrayView2<T>) -> Array2<T> {
        x.select(Axis(1), &self.perm)
    }

    pub fn apply_inverse<T: Real>(&self, x: ArrayView2<T>) -> Array2<T> {
        x.select(Axis(1), &self.inv)
    }
}

/// Flow architecture. `hidden` lists the hidden widths of every subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub clamp: Option<f64>,
    pub activation: Activation,
}

impl FlowConfig {
    pub fn new(dim: usize, cond_dim: usize, blocks: usize, hidden: Vec<usize>) -> Self {
        Self {
            dim,
            cond_dim,
            blocks,
            hidden,
            clamp: Some(2.5),
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock<T> {
    dim: usize,
    d1: usize,
    cond_dim: usize,
    clamp: Option<T>,
    // parameter order: s2, t2, s1, t1
    nets: [DenseNet<T>; 4],
}

const S2: usize = 0;
const T2: usize = 1;
const S1: usize = 2;
const T1: usize = 3;

/// Activations of one block pass, in whichever direction it ran.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    a1: Array2<T>,
    a2: Array2<T>,
    b1: Array2<T>,
    b2: Array2<T>,
    s1: Array2<T>,
    s2: Array2<T>,
    e1: Array2<T>,
    e2: Array2<T>,
    nets: [NetCache<T>; 4],
}

fn with_cond<T: Real>(h: ArrayView2<T>, y: ArrayView2<T>) -> Array2<T> {
    if y.ncols() == 0 {
        h.to_owned()
    } else {
        concatenate(Axis(1), &[h, y]).expect("equal row counts")
    }
}

impl<T: Real> CouplingBlock<T> {
    /// Hidden layers are fan-in initialized, final layers zeroed: the block starts as the identity.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        clamp: Option<f64>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("coupling blocks need dim >= 2".into()));
        }
        let d1 = dim.div_ceil(2);
        let d2 = dim - d1;
        let sizes = |din: usize, dout: usize| {
            let mut v = vec![din + cond_dim];
            v.extend_from_slice(hidden);
            v.push(dout);
            v
        };
        let mut make = |din, dout| -> Result<DenseNet<T>> {
            let mut n = DenseNet::init(&sizes(din, dout), activation, rng)?;
            n.zero_output_layer();
            Ok(n)
        };
        let nets = [make(d2, d1)?, make(d2, d1)?, make(d1, d2)?, make(d1, d2)?];
        Ok(Self {
            dim,
            d1,
            cond_dim,
            clamp: clamp.map(T::lit),
            nets,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn split(&self) -> (usize, usize) {
        (self.d1, self.dim - self.d1)
    }

    pub fn clamp(&self) -> Option<T> {
        self.clamp
    }

    pub fn nets(&self) -> &[DenseNet<T>; 4] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [DenseNet<T>; 4] {
        &mut self.nets
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(DenseNet::num_params).sum()
    }

    fn scale(&self, raw: Array2<T>) -> Array2<T> {
        match self.clamp {
            Some(c) => raw.mapv(|r| c * (r / c).tanh()),
            None => raw,
        }
    }

    /// `d s / d raw` written in terms of the clamped value.
    fn scale_grad(&self, g: &mut Array2<T>, s: &Array2<T>) {
        if let Some(c) = self.clamp {
            g.zip_mut_with(s, |g, &s| {
                let q = s / c;
                *g *= T::one() - q * q;
            });
        }
    }

    fn check_batch(&self, x: &ArrayView2<T>, y: &ArrayView2<T>) -> Result<()> {
        check_dim("coupling input", self.dim, x.ncols())?;
        check_dim("coupling condition", self.cond_dim, y.ncols())?;
        check_dim("condition rows", x.nrows(), y.nrows())
    }

    pub fn forward(&self, xi: &[T], y: &[T]) -> Result<(Vec<T>, T)> {
        let xv = ArrayView2::from_shape((1, xi.len()), xi).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        self.check_batch(&xv, &yv)?;
        let (x, ld, _) = self.forward_cached(xv, yv);
        finite_row(x, ld[0], "coupling forward")
    }

    pub fn inverse(&self, x: &[T], y: &[T]) -> Result<(Vec<T>, T)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        self.check_batch(&xv, &yv)?;
        let (xi, ld, _) = self.inverse_cached(xv, yv);
        finite_row(xi, ld[0], "coupling inverse")
    }

    pub fn forward_cached(
        &self,
        xi: ArrayView2<T>,
        y: ArrayView2<T>,
    ) -> (Array2<T>, Array1<T>, BlockCache<T>) {
        let d1 = self.d1;
        let xi1 = xi.slice(s![.., ..d1]).to_owned();
        let xi2 = xi.slice(s![.., d1..]).to_owned();
        let in2 = with_cond(xi2.view(), y);
        let c_s2 = self.nets[S2].forward_cached(in2.view());
        let c_t2 = self.nets[T2].forward_cached(in2.view());
        let s2 = self.scale(c_s2.output().clone());
        let e2 = s2.mapv(T::exp);
        let x1 = &xi1 * &e2 + c_t2.output();
        let in1 = with_cond(x1.view(), y);
        let c_s1 = self.nets[S1].forward_cached(in1.view());
        let c_t1 = self.nets[T1].forward_cached(in1.view());
        let s1 = self.scale(c_s1.output().clone());
        let e1 = s1.mapv(T::exp);
        let x2 = &xi2 * &e1 + c_t1.output();
        let ld = s2.sum_axis(Axis(1)) + s1.sum_axis(Axis(1));
        let x = concatenate(Axis(1), &[x1.view(), x2.view()]).expect("rows");
        let cache = BlockCache {
            a1: xi1,
            a2: xi2,
            b1: x1,
            b2: x2,
            s1,
            s2,
            e1,
            e2,
            nets: [c_s2, c_t2, c_s1, c_t1],
        };
        (x, ld, cache)
    }

    /// Closed-form inverse; the returned log-det is `-log|det ∇T|` at the pre-image.
    pub fn inverse_cached(
        &self,
        x: ArrayView2<T>,
        y: ArrayView2<T>,
    ) -> (Array2<T>, Array1<T>, BlockCache<T>) {
        let d1 = self.d1;
        let x1 = x.slice(s![.., ..d1]).to_owned();
        let x2 = x.slice(s![.., d1..]).to_owned();
        let in1 = with_cond(x1.view(), y);
        let c_s1 = self.nets[S1].forward_cached(in1.view());
        let c_t1 = self.nets[T1].forward_cached(in1.view());
        let s1 = self.scale(c_s1.output().clone());
        let e1 = s1.mapv(|v| (-v).exp());
        let xi2 = (&x2 - c_t1.output()) * &e1;
        let in2 = with_cond(xi2.view(), y);
        let c_s2 = self.nets[S2].forward_cached(in2.view());
        let c_t2 = self.nets[T2].forward_cached(in2.view());
        let s2 = self.scale(c_s2.output().clone());
        let e2 = s2.mapv(|v| (-v).exp());
        let xi1 = (&x1 - c_t2.output()) * &e2;
        let ld = -(s1.sum_axis(Axis(1)) + s2.sum_axis(Axis(1)));
        let xi = concatenate(Axis(1), &[xi1.view(), xi2.view()]).expect("rows");
        let cache = BlockCache {
            a1: x1,
            a2: x2,
            b1: xi1,
            b2: xi2,
            s1,
            s2,
            e1,
            e2,
            nets: [c_s2, c_t2, c_s1, c_t1],
        };
        (xi, ld, cache)
    }

    fn net_offsets(&self) -> [usize; 5] {
        let mut o = [0; 5];
        for k in 0..4 {
            o[k + 1] = o[k] + self.nets[k].num_params();
        }
        o
    }

    fn backprop_net(
        &self,
        k: usize,
        cache: &BlockCache<T>,
        upstream: &Array2<T>,
        grads: &mut [T],
        offsets: &[usize; 5],
    ) -> Array2<T> {
        self.nets[k].backward_batch(
            &cache.nets[k],
            upstream.view(),
            &mut grads[offsets[k]..offsets[k + 1]],
        )
    }

    /// Reverse pass of [`Self::forward_cached`]. `gx` is the upstream gradient on
    /// the output, `gld` the per-row weight on the log-det. Parameter gradients
    /// are added to `grads`; the gradient on `ξ` is returned.
    pub fn backward_forward(
        &self,
        cache: &BlockCache<T>,
        gx: ArrayView2<T>,
        gld: ArrayView1<T>,
        grads: &mut [T],
    ) -> Array2<T> {
        let d1 = self.d1;
        let off = self.net_offsets();
        let gld_col = gld.insert_axis(Axis(1));
        let gx1 = gx.slice(s![.., ..d1]);
        let gx2 = gx.slice(s![.., d1..]).to_owned();

        // x2 = ξ2 e1 + t1(x1)
        let mut g_s1 = &gx2 * &cache.a2 * &cache.e1 + &gld_col;
        self.scale_grad(&mut g_s1, &cache.s1);
        let mut gxi2 = &gx2 * &cache.e1;
        let gin1_s = self.backprop_net(S1, cache, &g_s1, grads, &off);
        let gin1_t = self.backprop_net(T1, cache, &gx2, grads, &off);
        let gx1_tot = &gx1 + &gin1_s.slice(s![.., ..d1]) + gin1_t.slice(s![.., ..d1]);

        // x1 = ξ1 e2 + t2(ξ2)
        let mut g_s2 = &gx1_tot * &cache.a1 * &cache.e2 + &gld_col;
        self.scale_grad(&mut g_s2, &cache.s2);
        let gxi1 = &gx1_tot * &cache.e2;
        let gin2_s = self.backprop_net(S2, cache, &g_s2, grads, &off);
        let gin2_t = self.backprop_net(T2, cache, &gx1_tot, grads, &off);
        let d2 = self.dim - d1;
        gxi2 += &gin2_s.slice(s![.., ..d2]);
        gxi2 += &gin2_t.slice(s![.., ..d2]);
        concatenate(Axis(1), &[gxi1.view(), gxi2.view()]).expect("rows")
    }

    /// Reverse pass of [`Self::inverse_cached`]; returns the gradient on `x`.
    pub fn backward_inverse(
        &self,
        cache: &BlockCache<T>,
        gxi: ArrayView2<T>,
        gld: ArrayView1<T>,
        grads: &mut [T],
    ) -> Array2<T> {
        let d1 = self.d1;
        let d2 = self.dim - d1;
        let off = self.net_offsets();
        let gld_col = gld.insert_axis(Axis(1));
        let gxi1 = gxi.slice(s![.., ..d1]).to_owned();
        let gxi2 = gxi.slice(s![.., d1..]);

        // ξ1 = (x1 - t2(ξ2)) e^{-s2}
        let mut g_s2 = -(&gxi1 * &cache.b1) - &gld_col;
        self.scale_grad(&mut g_s2, &cache.s2);
        let g_t2 = -(&gxi1 * &cache.e2);
        let mut gx1 = &gxi1 * &cache.e2;
        let gin2_s = self.backprop_net(S2, cache, &g_s2, grads, &off);
        let gin2_t = self.backprop_net(T2, cache, &g_t2, grads, &off);
        let gxi2_tot = &gxi2 + &gin2_s.slice(s![.., ..d2]) + gin2_t.slice(s![.., ..d2]);

        // ξ2 = (x2 - t1(x1)) e^{-s1}
        let mut g_s1 = -(&gxi2_tot * &cache.b2) - &gld_col;
        self.scale_grad(&mut g_s1, &cache.s1);
        let g_t1 = -(&gxi2_tot * &cache.e1);
        let gx2 = &gxi2_tot * &cache.e1;
        let gin1_s = self.backprop_net(S1, cache, &g_s1, grads, &off);
        let gin1_t = self.backprop_net(T1, cache, &g_t1, grads, &off);
        gx1 += &gin1_s.slice(s![.., ..d1]);
        gx1 += &gin1_t.slice(s![.., ..d1]);
        concatenate(Axis(1), &[gx1.view(), gx2.view()]).expect("rows")
    }
}

fn finite_row<T: Real>(v: Array2<T>, ld: T, what: &str) -> Result<(Vec<T>, T)> {
    if !ld.is_finite() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok((v.into_raw_vec_and_offset().0, ld))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCouplingFlow<T> {
    dim: usize,
    cond_dim: usize,
    stages: Vec<(Permutation, CouplingBlock<T>)>,
}

#[derive(Debug, Clone)]
pub struct FlowCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> ConditionalCouplingFlow<T> {
    /// Random fixed permutations and identity-initialized blocks.
    pub fn new<R: Rng + ?Sized>(cfg: &FlowConfig, rng: &mut R) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::Config("a flow needs at least one block".into()));
        }
        let stages = (0..cfg.blocks)
            .map(|_| {
                let p = Permutation::random(cfg.dim, rng);
                let b = CouplingBlock::new(
                    cfg.dim,
                    cfg.cond_dim,
                    &cfg.hidden,
                    cfg.clamp,
                    cfg.activation,
                    rng,
                )?;
                Ok((p, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: cfg.dim,
            cond_dim: cfg.cond_dim,
            stages,
        })
    }

    pub fn from_stages(stages: Vec<(Permutation, CouplingBlock<T>)>) -> Result<Self> {
        let (p0, b0) = stages
            .first()
            .ok_or_else(|| Error::Config("empty flow".into()))?;
        let (dim, cond_dim) = (b0.dim(), b0.cond_dim());
        for (p, b) in &stages {
            check_dim("flow permutation", dim, p.len())?;
            check_dim("flow block dim", dim, b.dim())?;
            check_dim("flow block condition", cond_dim, b.cond_dim())?;
        }
        let _ = p0;
        Ok(Self {
            dim,
            cond_dim,
            stages,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn stages(&self) -> &[(Permutation, CouplingBlock<T>)] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [(Permutation, CouplingBlock<T>)] {
        &mut self.stages
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|(_, b)| b.num_params()).sum()
    }

    /// Product of the stage permutations. The flow undoes it after the last
    /// block, so a flow with identity blocks is the identity map.
    fn net_permutation(&self) -> Permutation {
        let mut c: Vec<usize> = (0..self.dim).collect();
        for (p, _) in &self.stages {
            c = p.indices().iter().map(|&i| c[i]).collect();
        }
        Permutation::new(c).expect("composition of permutations")
    }

    fn check_batch(&self, x: &ArrayView2<T>, y: &ArrayView2<T>) -> Result<()> {
        check_dim("flow input", self.dim, x.ncols())?;
        check_dim("flow condition", self.cond_dim, y.ncols())?;
        check_dim("condition rows", x.nrows(), y.nrows())
    }

    pub fn forward(&self, z: &[T], y: &[T]) -> Result<(Vec<T>, T)> {
        let zv = ArrayView2::from_shape((1, z.len()), z).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        let (x, ld) = self.forward_batch(zv, yv)?;
        finite_row(x, ld[0], "flow forward")
    }

    pub fn inverse(&self, x: &[T], y: &[T]) -> Result<(Vec<T>, T)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
        let (z, ld) = self.inverse_batch(xv, yv)?;
        finite_row(z, ld[0], "flow inverse")
    }

    pub fn forward_batch(&self, z: ArrayView2<T>, y: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        let (x, ld, _) = self.forward_cached(z, y)?;
        Ok((x, ld))
    }

    pub fn inverse_batch(&self, x: ArrayView2<T>, y: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        let (z, ld, _) = self.inverse_cached(x, y)?;
        Ok((z, ld))
    }

    pub fn forward_cached(
        &self,
        z: ArrayView2<T>,
        y: ArrayView2<T>,
    ) -> Result<(Array2<T>, Array1<T>, FlowCache<T>)> {
        self.check_batch(&z, &y)?;
        let mut v = z.to_owned();
        let mut ld = Array1::zeros(z.nrows());
        let mut blocks = Vec::with_capacity(self.stages.len());
        for (p, b) in &self.stages {
            let pv = p.apply(v.view());
            let (out, l, c) = b.forward_cached(pv.view(), y);
            ld += &l;
            blocks.push(c);
            v = out;
        }
        let v = self.net_permutation().apply_inverse(v.view());
        Ok((v, ld, FlowCache { blocks }))
    }

    pub fn inverse_cached(
        &self,
        x: ArrayView2<T>,
        y: ArrayView2<T>,
    ) -> Result<(Array2<T>, Array1<T>, FlowCache<T>)> {
        self.check_batch(&x, &y)?;
        let mut v = self.net_permutation().apply(x);
        let mut ld = Array1::zeros(x.nrows());
        let mut blocks = Vec::with_capacity(self.stages.len());
        for (p, b) in self.stages.iter().rev() {
            let (out, l, c) = b.inverse_cached(v.view(), y);
            ld += &l;
            blocks.push(c);
            v = p.apply_inverse(out.view());
        }
        blocks.reverse();
        Ok((v, ld, FlowCache { blocks }))
    }

    fn stage_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for (_, b) in &self.stages {
            off.push(off.last().unwrap() + b.num_params());
        }
        off
    }

    fn check_cache(&self, cache: &FlowCache<T>) -> Result<()> {
        if cache.blocks.len() != self.stages.len() {
            return Err(Error::Config("flow cache does not match the flow".into()));
        }
        Ok(())
    }

    /// Gradients of `Σ_rows <gx, x> + gld · logdet` for a forward pass.
    /// Parameter gradients are added into `grads` (length [`Self::num_params`]).
    pub fn backward_forward(
        &self,
        cache: &FlowCache<T>,
        gx: ArrayView2<T>,
        gld: ArrayView1<T>,
        grads: &mut [T],
    ) -> Result<Array2<T>> {
        self.check_cache(cache)?;
        check_dim("flow gradient buffer", self.num_params(), grads.len())?;
        let off = self.stage_offsets();
        let mut g = self.net_permutation().apply(gx);
        for (k, (p, b)) in self.stages.iter().enumerate().rev() {
            let gp = b.backward_forward(&cache.blocks[k], g.view(), gld, &mut grads[off[k]..off[k + 1]]);
            g = p.apply_inverse(gp.view());
        }
        Ok(g)
    }

    /// Gradients of `Σ_rows <gz, z> + gld · logdet_inv` for an inverse pass.
    pub fn backward_inverse(
        &self,
        cache: &FlowCache<T>,
        gz: ArrayView2<T>,
        gld: ArrayView1<T>,
        grads: &mut [T],
    ) -> Result<Array2<T>> {
        self.check_cache(cache)?;
        check_dim("flow gradient buffer", self.num_params(), grads.len())?;
        let off = self.stage_offsets();
        let mut g = gz.to_owned();
        for (k, (p, b)) in self.stages.iter().enumerate() {
            let gp = p.apply(g.view());
            g = b.backward_inverse(&cache.blocks[k], gp.view(), gld, &mut grads[off[k]..off[k + 1]]);
        }
        Ok(self.net_permutation().apply_inverse(g.view()))
    }

    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, b) in &self.stages {
            for n in b.nets() {
                n.write_params(&mut out);
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[T]) -> Result<()> {
        check_dim("flow parameters", self.num_params(), params.len())?;
        let mut off = 0;
        for (_, b) in &mut self.stages {
            for n in b.nets_mut() {
                let k = n.num_params();
                n.set_params_flat(&params[off..off + k])?;
                off += k;
            }
        }
        Ok(())
    }

    /// `"SNFF"`, dims, then per stage: permutation, clamp, four networks.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SNFF")?;
        codec::write_len(w, self.dim)?;
        codec::write_len(w, self.cond_dim)?;
        codec::write_len(w, self.stages.len())?;
        for (p, b) in &self.stages {
            for &i in p.indices() {
                codec::write_len(w, i)?;
            }
            let clamp: Vec<T> = b.clamp.into_iter().collect();
            codec::write_reals(w, &clamp)?;
            for n in b.nets() {
                n.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read + ?Sized>(r: &mut R) -> Result<Self> {
        codec::expect_magic(r, b"SNFF")?;
        let dim = codec::read_len(r)?;
        let cond_dim = codec::read_len(r)?;
        let n = codec::read_len(r)?;
        let d1 = dim.div_ceil(2);
        let mut stages = Vec::with_capacity(n);
        for _ in 0..n {
            let perm = (0..dim)
                .map(|_| codec::read_len(r))
                .collect::<Result<Vec<_>>>()?;
            let p = Permutation::new(perm)?;
            let clamp = codec::read_reals::<T, _>(r)?.first().copied();
            let nets = [
                DenseNet::read_from(r)?,
                DenseNet::read_from(r)?,
                DenseNet::read_from(r)?,
                DenseNet::read_from(r)?,
            ];
            let d2 = dim - d1;
            let want = [(d2, d1), (d2, d1), (d1, d2), (d1, d2)];
            for (net, (i, o)) in nets.iter().zip(want) {
                check_dim("subnet input", i + cond_dim, net.input_dim())?;
                check_dim("subnet output", o, net.output_dim())?;
            }
            stages.push((
                p,
                CouplingBlock {
                    dim,
                    d1,
                    cond_dim,
                    clamp,
                    nets,
                },
            ));
        }
        Self::from_stages(stages)
    }
}
