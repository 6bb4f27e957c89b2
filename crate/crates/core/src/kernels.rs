//! Langevin, random-walk Metropolis-Hastings and MALA steps as replayable
//! batched kernels, plus the per-layer log-quotient terms and their adjoints.
//!
//! Conventions: `u = -log p`, `G = ∇log p`, `H = ∇² log p`. A Langevin step is
//! `x' = x + a1 G(x) + a2 ξ`; MALA proposes the same point and accepts iff
//! `ln U < log α` (a tie rejects).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub a1: f64,
    pub a2: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Proposal {
    RandomWalk { sigma: f64 },
    Mala { a1: f64, a2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    pub proposal: Proposal,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Langevin(LangevinConfig),
    Mh(MhConfig),
}

impl Kernel {
    pub fn steps(&self) -> usize {
        match self {
            Kernel::Langevin(c) => c.steps,
            Kernel::Mh(c) => c.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            Kernel::Langevin(c) => {
                pos(c.a1, "a1")?;
                pos(c.a2, "a2")
            }
            Kernel::Mh(c) => match c.proposal {
                Proposal::RandomWalk { sigma } => pos(sigma, "sigma"),
                Proposal::Mala { a1, a2 } => {
                    pos(a1, "a1")?;
                    pos(a2, "a2")
                }
            },
        }
    }
}

/// Orientation of a path relative to the generative chain `x_0 → x_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

/// `Exact` differentiates through stochastic steps; `Detached` treats them as
/// the identity and drops their quotient-term gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradientMode {
    #[default]
    Exact,
    Detached,
}

/// Randomness of one step for a whole batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBatch<T> {
    pub xi: Array2<T>,
    pub u: Option<Array1<T>>,
    pub accepted: Option<Vec<bool>>,
}

/// Single-sample view of a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<T> {
    pub xi: Vec<T>,
    pub u: Option<T>,
    pub accepted: Option<bool>,
}

/// Steps of one kernel application; `states[0]` is the input, `states[k]` the
/// point after step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord<T> {
    pub steps: Vec<StepBatch<T>>,
    pub states: Vec<Array2<T>>,
}

impl<T: Real> KernelRecord<T> {
    pub fn output(&self) -> &Array2<T> {
        self.states.last().expect("at least the input state")
    }

    /// Fraction of accepted proposals over all MH steps, if any.
    pub fn acceptance_rate(&self) -> Option<f64> {
        let (mut acc, mut tot) = (0usize, 0usize);
        for s in &self.steps {
            if let Some(a) = &s.accepted {
                acc += a.iter().filter(|&&v| v).count();
                tot += a.len();
            }
        }
        (tot > 0).then(|| acc as f64 / tot as f64)
    }

    pub fn step_record(&self, step: usize, row: usize) -> StepRecord<T> {
        let s = &self.steps[step];
        StepRecord {
            xi: s.xi.row(row).to_vec(),
            u: s.u.as_ref().map(|u| u[row]),
            accepted: s.accepted.as_ref().map(|a| a[row]),
        }
    }
}

fn draw_normal<T: Real>(n: usize, d: usize, rng: &mut dyn RngCore) -> Array2<T> {
    Array2::from_shape_simple_fn((n, d), || T::std_normal(rng))
}

fn draw_uniform<T: Real>(n: usize, rng: &mut dyn RngCore) -> Array1<T> {
    Array1::from_shape_simple_fn(n, || T::unit_uniform(rng))
}

fn ensure_finite<T: Real>(a: &Array2<T>, what: &str) -> Result<()> {
    if let Some(i) = a.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("{what} at batch row {i}")));
    }
    Ok(())
}

fn row_norm_sq<T: Real>(a: &Array2<T>) -> Array1<T> {
    a.map_axis(Axis(1), |r| r.dot(&r))
}

/// `log q(to | from)` up to a constant for a proposal with drift `c G(from)`
/// and noise scale `s`.
fn log_q<T: Real>(to: &Array2<T>, from: &Array2<T>, g_from: &Array2<T>, c: T, s: T) -> Array1<T> {
    let mut r = to - from;
    r.scaled_add(-c, g_from);
    row_norm_sq(&r) * (-T::lit(0.5) / (s * s))
}

struct State<T> {
    x: Array2<T>,
    lp: Option<Array1<T>>,
    g: Option<Array2<T>>,
}

fn ensure_grad<T: Real>(st: &mut State<T>, target: &dyn Density<T>, ys: ArrayView2<T>) -> Result<()> {
    if st.g.is_none() {
        let g = target.grad_log_density_batch(st.x.view(), ys);
        ensure_finite(&g, "gradient of the log-density")?;
        st.g = Some(g);
    }
    Ok(())
}

fn ensure_lp<T: Real>(st: &mut State<T>, target: &dyn Density<T>, ys: ArrayView2<T>) {
    if st.lp.is_none() {
        st.lp = Some(target.log_density_batch(st.x.view(), ys));
    }
}

/// Moves `st` one step. `rec` supplies frozen randomness; otherwise it is drawn.
fn step<T: Real>(
    st: &mut State<T>,
    target: &dyn Density<T>,
    ys: ArrayView2<T>,
    kernel: &Kernel,
    rec: Option<&StepBatch<T>>,
    rng: Option<&mut dyn RngCore>,
) -> Result<StepBatch<T>> {
    let (n, d) = st.x.dim();
    let mut rng = rng;
    let xi = match rec {
        Some(r) => {
            check_dim("recorded noise rows", n, r.xi.nrows())?;
            check_dim("recorded noise dim", d, r.xi.ncols())?;
            r.xi.clone()
        }
        None => draw_normal(n, d, *rng.as_mut().expect("rng or record")),
    };
    match *kernel {
        Kernel::Langevin(c) => {
            ensure_grad(st, target, ys)?;
            let mut x = st.x.clone();
            x.scaled_add(T::lit(c.a1), st.g.as_ref().unwrap());
            x.scaled_add(T::lit(c.a2), &xi);
            *st = State { x, lp: None, g: None };
            Ok(StepBatch { xi, u: None, accepted: None })
        }
        Kernel::Mh(c) => {
            let u = match rec {
                Some(r) => r
                    .u
                    .clone()
                    .ok_or_else(|| Error::Config("MH replay needs uniforms".into()))?,
                None => draw_uniform(n, *rng.as_mut().expect("rng or record")),
            };
            ensure_lp(st, target, ys);
            let (prop, log_ratio_q, g_prop) = match c.proposal {
                Proposal::RandomWalk { sigma } => {
                    let mut p = st.x.clone();
                    p.scaled_add(T::lit(sigma), &xi);
                    (p, None, None)
                }
                Proposal::Mala { a1, a2 } => {
                    ensure_grad(st, target, ys)?;
                    let (a1, a2) = (T::lit(a1), T::lit(a2));
                    let g = st.g.as_ref().unwrap();
                    let mut p = st.x.clone();
                    p.scaled_add(a1, g);
                    p.scaled_add(a2, &xi);
                    let gp = target.grad_log_density_batch(p.view(), ys);
                    let back = log_q(&st.x, &p, &gp, a1, a2);
                    let fwd = log_q(&p, &st.x, g, a1, a2);
                    (p, Some(back - fwd), Some(gp))
                }
            };
            let lp_prop = target.log_density_batch(prop.view(), ys);
            let lp_cur = st.lp.as_ref().unwrap();
            let mut log_alpha = &lp_prop - lp_cur;
            if let Some(q) = log_ratio_q {
                log_alpha += &q;
            }
            let accepted: Vec<bool> = match rec.and_then(|r| r.accepted.clone()) {
                Some(a) => {
                    check_dim("recorded acceptance flags", n, a.len())?;
                    a
                }
                None => u
                    .iter()
                    .zip(log_alpha.iter())
                    .map(|(&u, &la)| u.ln() < la)
                    .collect(),
            };
            let mut x = st.x.clone();
            let mut lp = lp_cur.clone();
            let mut g = st.g.clone();
            for (i, &acc) in accepted.iter().enumerate() {
                if acc {
                    x.row_mut(i).assign(&prop.row(i));
                    lp[i] = lp_prop[i];
                    if let (Some(g), Some(gp)) = (g.as_mut(), g_prop.as_ref()) {
                        g.row_mut(i).assign(&gp.row(i));
                    }
                }
            }
            // a non-finite proposal gradient is only harmful once it is accepted
            if let Some(g) = &g {
                ensure_finite(g, "gradient of the log-density")?;
            }
            *st = State { x, lp: Some(lp), g };
            Ok(StepBatch {
                xi,
                u: Some(u),
                accepted: Some(accepted),
            })
        }
    }
}

fn check_inputs<T: Real>(x: &ArrayView2<T>, ys: &ArrayView2<T>, target: &dyn Density<T>) -> Result<()> {
    check_dim("kernel state", target.dim(), x.ncols())?;
    check_dim("kernel condition", target.cond_dim(), ys.ncols())?;
    check_dim("condition rows", x.nrows(), ys.nrows())
}

/// Applies `kernel.steps()` steps, drawing all randomness from `rng`.
pub fn kernel_apply_batch<T: Real>(
    x: ArrayView2<T>,
    ys: ArrayView2<T>,
    target: &dyn Density<T>,
    kernel: &Kernel,
    rng: &mut dyn RngCore,
) -> Result<KernelRecord<T>> {
    check_inputs(&x, &ys, target)?;
    let mut st = State { x: x.to_owned(), lp: None, g: None };
    let mut states = vec![st.x.clone()];
    let mut steps = Vec::with_capacity(kernel.steps());
    for _ in 0..kernel.steps() {
        steps.push(step(&mut st, target, ys, kernel, None, Some(&mut *rng))?);
        states.push(st.x.clone());
    }
    Ok(KernelRecord { steps, states })
}

/// Like [`kernel_apply_batch`] but keeps only the final state and the overall
/// acceptance rate (MH only). Use for long baseline chains.
pub fn kernel_run_batch<T: Real>(
    x: ArrayView2<T>,
    ys: ArrayView2<T>,
    target: &dyn Density<T>,
    kernel: &Kernel,
    rng: &mut dyn RngCore,
) -> Result<(Array2<T>, Option<f64>)> {
    check_inputs(&x, &ys, target)?;
    let mut st = State { x: x.to_owned(), lp: None, g: None };
    let mut acc = 0usize;
    let mut tried = 0usize;
    for _ in 0..kernel.steps() {
        let rec = step(&mut st, target, ys, kernel, None, Some(&mut *rng))?;
        if let Some(a) = rec.accepted {
            acc += a.iter().filter(|&&b| b).count();
            tried += a.len();
        }
    }
    let rate = matches!(kernel, Kernel::Mh(_)) && tried > 0;
    Ok((st.x, rate.then(|| acc as f64 / tried as f64)))
}

/// Re-runs a kernel from `x` with frozen noise, uniforms and acceptance flags.
pub fn kernel_replay_batch<T: Real>(
    x: ArrayView2<T>,
    ys: ArrayView2<T>,
    target: &dyn Density<T>,
    kernel: &Kernel,
    steps: &[StepBatch<T>],
) -> Result<KernelRecord<T>> {
    check_inputs(&x, &ys, target)?;
    check_dim("recorded steps", kernel.steps(), steps.len())?;
    let mut st = State { x: x.to_owned(), lp: None, g: None };
    let mut states = vec![st.x.clone()];
    let mut out = Vec::with_capacity(steps.len());
    for r in steps {
        out.push(step(&mut st, target, ys, kernel, Some(r), None)?);
        states.push(st.x.clone());
    }
    Ok(KernelRecord { steps: out, states })
}

/// `(a, b) = (x_{t-1}, x_t)` for a step or layer that ran from `input` to `output`.
fn oriented<'a, T>(dir: Direction, input: &'a Array2<T>, output: &'a Array2<T>) -> (&'a Array2<T>, &'a Array2<T>) {
    match dir {
        Direction::Forward => (input, output),
        Direction::Reverse => (output, input),
    }
}

/// `η = (a - b + a1 G(a)) / a2`, `η̃ = (a - b - a1 G(b)) / a2`.
fn langevin_etas<T: Real>(
    a: &Array2<T>,
    b: &Array2<T>,
    ga: &Array2<T>,
    gb: &Array2<T>,
    a1: T,
    a2: T,
) -> (Array2<T>, Array2<T>) {
    let diff = a - b;
    let mut eta = diff.clone();
    eta.scaled_add(a1, ga);
    let mut eta_t = diff;
    eta_t.scaled_add(-a1, gb);
    (eta / a2, eta_t / a2)
}

/// Per-row log-quotient term of one stochastic layer, in forward orientation
/// `(x_{t-1}, x_t)`. Multi-step Langevin layers sum the per-step terms; MH
/// layers telescope to `log p(x_{t-1}) - log p(x_t)`.
pub fn layer_term<T: Real>(
    kernel: &Kernel,
    target: &dyn Density<T>,
    ys: ArrayView2<T>,
    record: &KernelRecord<T>,
    dir: Direction,
) -> Array1<T> {
    let n = record.states[0].nrows();
    match *kernel {
        Kernel::Mh(_) => {
            let (a, b) = oriented(dir, &record.states[0], record.output());
            target.log_density_batch(a.view(), ys) - target.log_density_batch(b.view(), ys)
        }
        Kernel::Langevin(c) => {
            let (a1, a2) = (T::lit(c.a1), T::lit(c.a2));
            let grads: Vec<Array2<T>> = record
                .states
                .iter()
                .map(|s| target.grad_log_density_batch(s.view(), ys))
                .collect();
            let mut total = Array1::zeros(n);
            for k in 0..record.steps.len() {
                let (a, b) = oriented(dir, &record.states[k], &record.states[k + 1]);
                let (ga, gb) = oriented(dir, &grads[k], &grads[k + 1]);
                let (eta, eta_t) = langevin_etas(a, b, ga, gb, a1, a2);
                total += &((row_norm_sq(&eta) - row_norm_sq(&eta_t)) * T::lit(0.5));
            }
            total
        }
    }
}

/// Pulls the adjoint `g_out` on the kernel output back to its input.
///
/// With `term = Some((w, dir))` the gradient of `w · layer_term(dir)` is
/// included. Rejected steps and random-walk steps pass gradients through
/// unchanged; Langevin and accepted MALA steps apply `I + a1 H(x_in)`.
pub fn kernel_backward<T: Real>(
    kernel: &Kernel,
    target: &dyn Density<T>,
    ys: ArrayView2<T>,
    record: &KernelRecord<T>,
    g_out: ArrayView2<T>,
    term: Option<(T, Direction)>,
    mode: GradientMode,
) -> Array2<T> {
    let mut g = g_out.to_owned();
    if mode == GradientMode::Detached {
        return g;
    }
    let states = &record.states;
    let last = states.len() - 1;
    match *kernel {
        Kernel::Mh(c) => {
            // telescoped term: w (log p(a) - log p(b))
            let sign_out = match term {
                Some((w, Direction::Forward)) => Some(-w),
                Some((w, Direction::Reverse)) => Some(w),
                None => None,
            };
            if let Some(s) = sign_out {
                let go = target.grad_log_density_batch(states[last].view(), ys);
                g.scaled_add(s, &go);
            }
            if let Proposal::Mala { a1, .. } = c.proposal {
                let a1 = T::lit(a1);
                for k in (0..record.steps.len()).rev() {
                    let acc = record.steps[k].accepted.as_ref().expect("MH flags");
                    if !acc.iter().any(|&v| v) {
                        continue;
                    }
                    let mut v = g.clone();
                    for (i, mut r) in v.outer_iter_mut().enumerate() {
                        if !acc[i] {
                            r.fill(T::zero());
                        }
                    }
                    let h = target.hvp_batch(states[k].view(), ys, v.view());
                    g.scaled_add(a1, &h);
                }
            }
            if let Some(s) = sign_out {
                let gi = target.grad_log_density_batch(states[0].view(), ys);
                g.scaled_add(-s, &gi);
            }
            g
        }
        Kernel::Langevin(c) => {
            let (a1, a2) = (T::lit(c.a1), T::lit(c.a2));
            let grads: Option<Vec<Array2<T>>> = term.map(|_| {
                states
                    .iter()
                    .map(|s| target.grad_log_density_batch(s.view(), ys))
                    .collect()
            });
            for k in (0..record.steps.len()).rev() {
                let (x_in, x_out) = (&states[k], &states[k + 1]);
                match (term, grads.as_ref()) {
                    (Some((w, dir)), Some(gr)) => {
                        let (a, b) = oriented(dir, x_in, x_out);
                        let (ga, gb) = oriented(dir, &gr[k], &gr[k + 1]);
                        let (eta, eta_t) = langevin_etas(a, b, ga, gb, a1, a2);
                        // ∂f/∂a = (η - η̃ + a1 H(a) η)/a2, ∂f/∂b = (η̃ - η + a1 H(b) η̃)/a2
                        let (v_in, v_out, s_out) = match dir {
                            Direction::Forward => (&eta, &eta_t, &eta_t - &eta),
                            Direction::Reverse => (&eta_t, &eta, &eta - &eta_t),
                        };
                        let c = w / a2;
                        g.scaled_add(c, &s_out);
                        let h_out = target.hvp_batch(x_out.view(), ys, v_out.view());
                        g.scaled_add(c * a1, &h_out);
                        let mut v = g.clone();
                        v.scaled_add(c, v_in);
                        let h_in = target.hvp_batch(x_in.view(), ys, v.view());
                        g.scaled_add(-c, &s_out);
                        g.scaled_add(a1, &h_in);
                    }
                    _ => {
                        let h = target.hvp_batch(x_in.view(), ys, g.view());
                        g.scaled_add(a1, &h);
                    }
                }
            }
            g
        }
    }
}

/// `min(0, log α)` for moving from `x` to `x_prop` under `proposal`.
pub fn mh_log_acceptance<T: Real>(
    target: &dyn Density<T>,
    proposal: &Proposal,
    x: &[T],
    x_prop: &[T],
    y: &[T],
) -> T {
    let mut la = target.log_density(x_prop, y) - target.log_density(x, y);
    if let Proposal::Mala { a1, a2 } = *proposal {
        let (a1, a2) = (T::lit(a1), T::lit(a2));
        let gx = target.grad_log_density(x, y);
        let gp = target.grad_log_density(x_prop, y);
        let lq = |to: &[T], from: &[T], g: &[T]| -> T {
            let s: T = to
                .iter()
                .zip(from)
                .zip(g)
                .map(|((&t, &f), &g)| {
                    let r = t - f - a1 * g;
                    r * r
                })
                .sum();
            -s / (T::lit(2.0) * a2 * a2)
        };
        la += lq(x, x_prop, &gp) - lq(x_prop, x, &gx);
    }
    if la.is_nan() {
        return T::neg_infinity();
    }
    la.min(T::zero())
}

pub fn mh_acceptance<T: Real>(
    target: &dyn Density<T>,
    proposal: &Proposal,
    x: &[T],
    x_prop: &[T],
    y: &[T],
) -> T {
    mh_log_acceptance(target, proposal, x, x_prop, y).exp()
}

fn single<T: Real>(v: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((1, v.len()), v).expect("row")
}

fn single_step<T: Real>(
    x: &[T],
    y: &[T],
    target: &dyn Density<T>,
    kernel: Kernel,
    rng: &mut dyn RngCore,
) -> Result<(Vec<T>, StepRecord<T>)> {
    let rec = kernel_apply_batch(single(x), single(y), target, &kernel, rng)?;
    Ok((rec.output().row(0).to_vec(), rec.step_record(0, 0)))
}

pub fn langevin_step<T: Real>(
    x: &[T],
    y: &[T],
    target: &dyn Density<T>,
    cfg: &LangevinConfig,
    rng: &mut dyn RngCore,
) -> Result<(Vec<T>, StepRecord<T>)> {
    single_step(x, y, target, Kernel::Langevin(LangevinConfig { steps: 1, ..*cfg }), rng)
}

pub fn mh_step<T: Real>(
    x: &[T],
    y: &[T],
    target: &dyn Density<T>,
    proposal: &Proposal,
    rng: &mut dyn RngCore,
) -> Result<(Vec<T>, StepRecord<T>)> {
    let k = Kernel::Mh(MhConfig { proposal: *proposal, steps: 1 });
    single_step(x, y, target, k, rng)
}

pub fn kernel_apply<T: Real>(
    x: &[T],
    y: &[T],
    target: &dyn Density<T>,
    kernel: &Kernel,
    rng: &mut dyn RngCore,
) -> Result<(Vec<T>, Vec<StepRecord<T>>)> {
    let rec = kernel_apply_batch(single(x), single(y), target, kernel, rng)?;
    let steps = (0..rec.steps.len()).map(|k| rec.step_record(k, 0)).collect();
    Ok((rec.output().row(0).to_vec(), steps))
}

fn to_batch<T: Real>(records: &[StepRecord<T>]) -> Vec<StepBatch<T>> {
    records
        .iter()
        .map(|r| StepBatch {
            xi: Array2::from_shape_vec((1, r.xi.len()), r.xi.clone()).expect("row"),
            u: r.u.map(|u| Array1::from_elem(1, u)),
            accepted: r.accepted.map(|a| vec![a]),
        })
        .collect()
}

/// Single-sample replay from records.
pub fn kernel_replay<T: Real>(
    x: &[T],
    y: &[T],
    target: &dyn Density<T>,
    kernel: &Kernel,
    records: &[StepRecord<T>],
) -> Result<Vec<T>> {
    let rec = kernel_replay_batch(single(x), single(y), target, kernel, &to_batch(records))?;
    Ok(rec.output().row(0).to_vec())
}

/// Vector-Jacobian product of the frozen-record map `x_in ↦ x_out`.
pub fn replay_gradient<T: Real>(
    x_in: &[T],
    y: &[T],
    g_out: &[T],
    records: &[StepRecord<T>],
    target: &dyn Density<T>,
    kernel: &Kernel,
    mode: GradientMode,
) -> Result<Vec<T>> {
    check_dim("output gradient", x_in.len(), g_out.len())?;
    let rec = kernel_replay_batch(single(x_in), single(y), target, kernel, &to_batch(records))?;
    let g = kernel_backward(kernel, target, single(y), &rec, single(g_out), None, mode);
    Ok(g.row(0).to_vec())
}
