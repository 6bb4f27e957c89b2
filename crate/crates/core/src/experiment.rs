//! Declarative experiment description: problem, chain layout, training and
//! evaluation settings, all driven by one master seed.
//!
//! Randomness is split into independent ChaCha streams of the master seed
//! (see [`Stream`]), so e.g. changing the number of evaluation observations
//! does not perturb training.

use ndarray::Array2;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{train, Chain, ChainTargets, Layer, LossConfig, TrainReport};
use crate::density::{Density, SampleableDensity, StdGaussian};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_models, mh_baseline, sample_chain_posterior, CubeGrid, EvalConfig, EvalReport, Metric, Sampler,
};
use crate::flow::{ConditionalCouplingFlow, FlowConfig};
use crate::kernels::{GradientMode, Kernel, LangevinConfig, MhConfig, Proposal};
use crate::nn::DenseNet;
use crate::problems::{
    surrogate::uniform_box, surrogate_fit, synthetic_forward_map, GaussianMixture, InverseProblem,
    LinearGaussianProblem, MixedNoiseProblem, SurrogateConfig, SurrogateReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub chain: ChainConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `y = A x + η`, `A = operator_scale · diag(1, 1/2, …, 1/d)`, `η ~ N(0, noise_var I)`,
    /// prior: `components` isotropic Gaussians with means uniform on `[-1, 1]^d`.
    LinearGaussian {
        dim: usize,
        components: usize,
        component_var: f64,
        operator_scale: f64,
        noise_var: f64,
        /// Mixture weights; equal when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// `y = F(x) + a F(x) η₁ + b η₂` with a relaxed uniform prior. `F` is a
    /// fixed random tanh network; the chain sees a fitted surrogate of it.
    MixedNoise {
        dim: usize,
        obs_dim: usize,
        a: f64,
        b: f64,
        alpha: f64,
        forward_hidden: usize,
        forward_gain: f64,
        forward_seed: u64,
        surrogate_samples: usize,
        surrogate_hidden: Vec<usize>,
        surrogate_epochs: usize,
        surrogate_batch: usize,
        surrogate_lr: f64,
        #[serde(default = "default_holdout")]
        surrogate_holdout: f64,
    },
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Index `T` of the posterior in the interpolation schedule; defaults to
    /// the number of layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerConfig {
    Flow {
        blocks: usize,
        hidden: Vec<usize>,
        #[serde(default = "default_clamp")]
        clamp: f64,
    },
    Langevin {
        a1: f64,
        a2: f64,
        steps: usize,
        target_index: usize,
    },
    Mala {
        a1: f64,
        a2: f64,
        steps: usize,
        target_index: usize,
    },
    RandomWalkMh {
        sigma: f64,
        steps: usize,
        target_index: usize,
    },
}

fn default_clamp() -> f64 {
    2.5
}

impl LayerConfig {
    fn kernel(&self) -> Option<(Kernel, usize)> {
        match *self {
            LayerConfig::Flow { .. } => None,
            LayerConfig::Langevin { a1, a2, steps, target_index } => {
                Some((Kernel::Langevin(LangevinConfig { a1, a2, steps }), target_index))
            }
            LayerConfig::Mala { a1, a2, steps, target_index } => Some((
                Kernel::Mh(MhConfig { proposal: Proposal::Mala { a1, a2 }, steps }),
                target_index,
            )),
            LayerConfig::RandomWalkMh { sigma, steps, target_index } => Some((
                Kernel::Mh(MhConfig { proposal: Proposal::RandomWalk { sigma }, steps }),
                target_index,
            )),
        }
    }
}

impl ChainConfig {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(self.layers.len())
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("chain needs at least one layer".into()));
        }
        let horizon = self.horizon();
        if horizon == 0 {
            return Err(Error::Config("chain horizon must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerConfig::Flow { blocks, hidden, clamp } => {
                    if *blocks == 0 || hidden.contains(&0) || !(*clamp > 0.0) {
                        return Err(Error::Config(format!("layer {i}: bad flow settings")));
                    }
                    if dim < 2 {
                        return Err(Error::Config("coupling flows need dimension >= 2".into()));
                    }
                }
                _ => {
                    let (k, t) = l.kernel().expect("stochastic layer");
                    k.validate().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    if t > horizon {
                        return Err(Error::Config(format!(
                            "layer {i}: target index {t} exceeds horizon {horizon}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds the chain; flows draw their initial weights from `rng` in layer order.
    pub fn build(&self, dim: usize, cond_dim: usize, rng: &mut dyn RngCore) -> Result<Chain<f64>> {
        self.validate(dim)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(match l {
                LayerConfig::Flow { blocks, hidden, clamp } => {
                    let mut fc = FlowConfig::new(dim, cond_dim, *blocks, hidden.clone());
                    fc.clamp = Some(*clamp);
                    Layer::Deterministic(ConditionalCouplingFlow::new(&fc, rng)?)
                }
                _ => {
                    let (kernel, target_index) = l.kernel().expect("stochastic layer");
                    Layer::Stochastic { kernel, target_index }
                }
            });
        }
        Chain::new(dim, cond_dim, layers, self.horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Treat stochastic layers as constants during backpropagation.
    #[serde(default)]
    pub detached: bool,
}

impl TrainingConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            batch: self.batch,
            steps: self.steps,
            lr: self.lr,
        }
    }

    pub fn mode(&self) -> GradientMode {
        if self.detached {
            GradientMode::Detached
        } else {
            GradientMode::Exact
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    W1,
    BinnedKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub metric: MetricKind,
    pub n_y: usize,
    pub samples: usize,
    #[serde(default = "default_cap")]
    pub w1_cap: usize,
    #[serde(default = "default_res")]
    pub grid_res: usize,
    #[serde(default = "default_lo")]
    pub grid_lo: f64,
    #[serde(default = "default_hi")]
    pub grid_hi: f64,
    /// MH steps per reference sample when no closed-form posterior exists.
    #[serde(default = "default_baseline_steps")]
    pub baseline_steps: usize,
    #[serde(default = "default_baseline_sigma")]
    pub baseline_sigma: f64,
    #[serde(default = "default_true")]
    pub noise_floor: bool,
}

fn default_cap() -> usize {
    crate::eval::DEFAULT_W1_CAP
}
fn default_res() -> usize {
    50
}
fn default_lo() -> f64 {
    -1.0
}
fn default_hi() -> f64 {
    1.0
}
fn default_baseline_steps() -> usize {
    1000
}
fn default_baseline_sigma() -> f64 {
    0.4
}
fn default_true() -> bool {
    true
}

impl EvaluationConfig {
    pub fn metric(&self, dim: usize) -> Result<Metric> {
        Ok(match self.metric {
            MetricKind::W1 => Metric::Wasserstein1 { cap: self.w1_cap },
            MetricKind::BinnedKl => Metric::BinnedKl {
                grid: CubeGrid::new(dim, self.grid_lo, self.grid_hi, self.grid_res)?,
            },
        })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.n_y == 0 || self.samples == 0 {
            return Err(Error::Config("evaluation needs n_y > 0 and samples > 0".into()));
        }
        if !(self.baseline_sigma > 0.0) {
            return Err(Error::Config("baseline_sigma must be positive".into()));
        }
        if self.metric == MetricKind::W1 && self.samples > self.w1_cap {
            return Err(Error::TooLarge { size: self.samples, cap: self.w1_cap });
        }
        self.metric(dim).map(|_| ())
    }
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Problem = 0,
    Init = 1,
    Training = 2,
    Observations = 3,
    Evaluation = 4,
    Sampling = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive")))
    }
}

impl ProblemConfig {
    pub fn dim(&self) -> usize {
        match *self {
            ProblemConfig::LinearGaussian { dim, .. } | ProblemConfig::MixedNoise { dim, .. } => dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            ProblemConfig::LinearGaussian { dim, .. } => dim,
            ProblemConfig::MixedNoise { obs_dim, .. } => obs_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ProblemConfig::LinearGaussian {
                dim,
                components,
                component_var,
                operator_scale,
                noise_var,
                weights,
            } => {
                if *dim == 0 || *components == 0 {
                    return Err(Error::Config("dim and components must be positive".into()));
                }
                positive(*component_var, "component_var")?;
                positive(*noise_var, "noise_var")?;
                if !operator_scale.is_finite() {
                    return Err(Error::Config("operator_scale must be finite".into()));
                }
                if let Some(w) = weights {
                    if w.len() != *components || w.iter().any(|&v| !(v > 0.0)) {
                        return Err(Error::Config("weights must be positive, one per component".into()));
                    }
                }
            }
            ProblemConfig::MixedNoise {
                dim,
                obs_dim,
                a,
                b,
                alpha,
                forward_hidden,
                forward_gain,
                surrogate_samples,
                surrogate_hidden,
                surrogate_batch,
                surrogate_lr,
                surrogate_holdout,
                ..
            } => {
                if *dim == 0 || *obs_dim == 0 || *forward_hidden == 0 || *surrogate_samples == 0 {
                    return Err(Error::Config("mixed-noise sizes must be positive".into()));
                }
                positive(*a, "a")?;
                positive(*b, "b")?;
                positive(*alpha, "alpha")?;
                positive(*forward_gain, "forward_gain")?;
                positive(*surrogate_lr, "surrogate_lr")?;
                if surrogate_hidden.contains(&0) || *surrogate_batch == 0 || !(0.0..1.0).contains(surrogate_holdout) {
                    return Err(Error::Config("bad surrogate settings".into()));
                }
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Static checks only; nothing is sampled or trained.
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.chain.validate(self.problem.dim())?;
        self.training.loss().validate()?;
        self.evaluation.validate(self.problem.dim())
    }

    /// Mixture-prior linear problem at desk scale: `d = 8`, `K = 3`.
    pub fn mixture_desk() -> Self {
        let lang = LayerConfig::Langevin { a1: 1e-6, a2: 2e-6f64.sqrt(), steps: 3, target_index: 3 };
        let mala = LayerConfig::Mala { a1: 1e-3, a2: 2e-3f64.sqrt(), steps: 3, target_index: 3 };
        let flow = LayerConfig::Flow { blocks: 4, hidden: vec![64, 64], clamp: 2.5 };
        let retarget = |l: &LayerConfig| match l.clone() {
            LayerConfig::Langevin { a1, a2, steps, .. } => LayerConfig::Langevin { a1, a2, steps, target_index: 6 },
            LayerConfig::Mala { a1, a2, steps, .. } => LayerConfig::Mala { a1, a2, steps, target_index: 6 },
            other => other,
        };
        Self {
            seed: 20210601,
            problem: ProblemConfig::LinearGaussian {
                dim: 8,
                components: 3,
                component_var: 0.01,
                operator_scale: 0.1,
                noise_var: 0.05,
                weights: None,
            },
            chain: ChainConfig {
                horizon: Some(6),
                layers: vec![
                    flow.clone(),
                    lang.clone(),
                    mala.clone(),
                    flow,
                    retarget(&lang),
                    retarget(&mala),
                ],
            },
            training: TrainingConfig { lambda: 0.0, batch: 512, steps: 2000, lr: 1e-3, detached: false },
            evaluation: EvaluationConfig {
                metric: MetricKind::W1,
                n_y: 20,
                samples: 1000,
                w1_cap: 2000,
                grid_res: 50,
                grid_lo: -1.0,
                grid_hi: 1.0,
                baseline_steps: 1000,
                baseline_sigma: 0.4,
                noise_floor: true,
            },
        }
    }

    /// Flow-only chain with the same parameter budget as [`Self::mixture_desk`].
    pub fn mixture_desk_flow_only() -> Self {
        let mut c = Self::mixture_desk();
        c.chain = ChainConfig {
            horizon: None,
            layers: vec![LayerConfig::Flow { blocks: 8, hidden: vec![64, 64], clamp: 2.5 }],
        };
        c
    }

    /// Mixed-noise problem with a synthetic `R^3 -> R^23` forward map.
    pub fn mixed_noise_desk() -> Self {
        let flow = LayerConfig::Flow { blocks: 1, hidden: vec![64, 64], clamp: 2.5 };
        let mh = LayerConfig::RandomWalkMh { sigma: 0.4, steps: 10, target_index: 8 };
        Self {
            seed: 20210602,
            problem: ProblemConfig::MixedNoise {
                dim: 3,
                obs_dim: 23,
                a: 0.2,
                b: 0.01,
                alpha: 1000.0,
                forward_hidden: 16,
                forward_gain: 0.7,
                forward_seed: 7,
                surrogate_samples: 4000,
                surrogate_hidden: vec![32, 32],
                surrogate_epochs: 60,
                surrogate_batch: 100,
                surrogate_lr: 1e-3,
                surrogate_holdout: 0.1,
            },
            chain: ChainConfig {
                horizon: Some(8),
                layers: vec![flow.clone(), mh.clone(), flow.clone(), mh.clone(), flow.clone(), mh.clone(), flow, mh],
            },
            training: TrainingConfig { lambda: 0.0, batch: 800, steps: 1000, lr: 1e-3, detached: false },
            evaluation: EvaluationConfig {
                metric: MetricKind::BinnedKl,
                n_y: 20,
                samples: 5000,
                w1_cap: 2000,
                grid_res: 50,
                grid_lo: -1.0,
                grid_hi: 1.0,
                baseline_steps: 1000,
                baseline_sigma: 0.4,
                noise_floor: true,
            },
        }
    }

    pub fn mixed_noise_desk_flow_only() -> Self {
        let mut c = Self::mixed_noise_desk();
        c.chain = ChainConfig {
            horizon: None,
            layers: vec![LayerConfig::Flow { blocks: 4, hidden: vec![64, 64], clamp: 2.5 }],
        };
        c
    }
}

#[allow(clippy::large_enum_variant)]
pub enum ProblemInstance {
    Linear(LinearGaussianProblem<f64>),
    Mixed {
        /// Posterior model seen by the chain and the MH reference (surrogate map).
        problem: MixedNoiseProblem<f64>,
        /// Same noise model with the exact forward map; generates test observations.
        truth: MixedNoiseProblem<f64>,
        surrogate: SurrogateReport,
    },
}

/// A built experiment: the concrete problem plus the config it came from.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: ProblemInstance,
    latent: StdGaussian,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Problem);
        let problem = match &config.problem {
            ProblemConfig::LinearGaussian {
                dim,
                components,
                component_var,
                operator_scale,
                noise_var,
                weights,
            } => {
                let random = GaussianMixture::random_prior(*dim, *components, *component_var, &mut rng)?;
                let prior = match weights {
                    Some(w) => GaussianMixture::isotropic(w, random.means().clone(), *component_var)?,
                    None => random,
                };
                let a = LinearGaussianProblem::harmonic_diagonal(*dim, *operator_scale);
                ProblemInstance::Linear(LinearGaussianProblem::new(a, *noise_var, prior)?)
            }
            ProblemConfig::MixedNoise {
                dim,
                obs_dim,
                a,
                b,
                alpha,
                forward_hidden,
                forward_gain,
                forward_seed,
                surrogate_samples,
                surrogate_hidden,
                surrogate_epochs,
                surrogate_batch,
                surrogate_lr,
                surrogate_holdout,
            } => {
                let f: DenseNet<f64> = synthetic_forward_map(*dim, *obs_dim, *forward_hidden, *forward_gain, *forward_seed)?;
                let xs: Array2<f64> = uniform_box(*surrogate_samples, *dim, &mut rng);
                let fs = f.forward_batch(xs.view());
                let sc = SurrogateConfig {
                    hidden: surrogate_hidden.clone(),
                    epochs: *surrogate_epochs,
                    batch: *surrogate_batch,
                    lr: *surrogate_lr,
                    holdout: *surrogate_holdout,
                };
                let (net, report) = surrogate_fit(xs.view(), fs.view(), &sc, rng.next_u64())?;
                ProblemInstance::Mixed {
                    problem: MixedNoiseProblem::new(net, *a, *b, *alpha)?,
                    truth: MixedNoiseProblem::new(f, *a, *b, *alpha)?,
                    surrogate: report,
                }
            }
        };
        Ok(Self {
            latent: StdGaussian::new(config.problem.dim()),
            config,
            problem,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.problem.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.config.problem.obs_dim()
    }

    pub fn inverse_problem(&self) -> &dyn InverseProblem<f64> {
        match &self.problem {
            ProblemInstance::Linear(p) => p,
            ProblemInstance::Mixed { problem, .. } => problem,
        }
    }

    pub fn latent(&self) -> &dyn SampleableDensity<f64> {
        &self.latent
    }

    pub fn posterior(&self) -> &dyn Density<f64> {
        self.inverse_problem().posterior()
    }

    pub fn targets(&self) -> ChainTargets<'_, f64> {
        ChainTargets::new(&self.latent, self.posterior())
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        stream_rng(self.config.seed, stream)
    }

    /// Fresh chain from the config, initialised from the `Init` stream.
    pub fn new_chain(&self) -> Result<Chain<f64>> {
        self.config.chain.build(self.dim(), self.obs_dim(), &mut self.rng(Stream::Init))
    }

    /// Trains on joint samples `(x, y)` drawn from the problem.
    pub fn train(&self, chain: &mut Chain<f64>, rng: &mut dyn RngCore) -> Result<TrainReport> {
        let p = self.inverse_problem();
        let mut data = |n: usize, r: &mut dyn RngCore| p.sample_joint(n, r);
        train(chain, &self.targets(), &mut data, &self.config.training.loss(), self.config.training.mode(), rng)
    }

    /// Test observations `y = F(x) + η`, `x` from the prior. For mixed-noise
    /// problems the exact forward map is used, not the surrogate.
    pub fn test_observations(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        let (_, ys) = match &self.problem {
            ProblemInstance::Linear(p) => p.sample_joint(n, rng),
            ProblemInstance::Mixed { truth, .. } => truth.sample_joint(n, rng),
        };
        ys.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Closed-form posterior draws when available, otherwise one MH chain per
    /// sample started from the prior.
    pub fn reference_samples(&self, y: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        match &self.problem {
            ProblemInstance::Linear(p) => Ok(p.analytic_posterior(y)?.sample(n, rng)),
            ProblemInstance::Mixed { problem, .. } => {
                let x0 = problem.prior().sample(n, rng);
                let ys = Array2::from_shape_fn((n, y.len()), |(_, j)| y[j]);
                let ev = &self.config.evaluation;
                mh_baseline(
                    problem.posterior(),
                    x0.view(),
                    ys.view(),
                    ev.baseline_steps,
                    Proposal::RandomWalk { sigma: ev.baseline_sigma },
                    rng,
                )
            }
        }
    }

    pub fn sample_posterior(&self, chain: &Chain<f64>, y: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        sample_chain_posterior(chain, &self.latent, Some(self.posterior()), y, n, rng)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let ev = &self.config.evaluation;
        Ok(EvalConfig {
            metric: ev.metric(self.dim())?,
            samples: ev.samples,
            noise_floor: ev.noise_floor,
        })
    }

    pub fn evaluate(&self, chain: &Chain<f64>, ys: &[Vec<f64>], rng: &mut dyn RngCore) -> Result<EvalReport> {
        let cfg = self.eval_config()?;
        let mut model = |y: &[f64], n: usize, r: &mut dyn RngCore| self.sample_posterior(chain, y, n, r);
        let mut reference = |y: &[f64], n: usize, r: &mut dyn RngCore| self.reference_samples(y, n, r);
        let mut reports = evaluate_models(&mut [&mut model], &mut reference, ys, &cfg, rng)?;
        Ok(reports.remove(0))
    }

    /// Scores several chains on the same reference clouds, which matters when
    /// references come from a slow MCMC baseline.
    pub fn evaluate_chains(&self, chains: &[&Chain<f64>], ys: &[Vec<f64>], rng: &mut dyn RngCore) -> Result<Vec<EvalReport>> {
        let cfg = self.eval_config()?;
        let mut samplers: Vec<Box<Sampler<'_>>> = chains
            .iter()
            .map(|&c| Box::new(move |y: &[f64], n: usize, r: &mut dyn RngCore| self.sample_posterior(c, y, n, r)) as Box<Sampler<'_>>)
            .collect();
        let mut refs: Vec<&mut Sampler<'_>> = samplers.iter_mut().map(|b| &mut **b).collect();
        let mut reference = |y: &[f64], n: usize, r: &mut dyn RngCore| self.reference_samples(y, n, r);
        evaluate_models(&mut refs, &mut reference, ys, &cfg, rng)
    }
}
