//! `snf`: train, sample and evaluate stochastic normalizing flows from a
//! TOML experiment file. Every random draw derives from the config seed.

mod model;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use snf_core::eval::{CubeGrid, CubeHistogram, EvalReport};
use snf_core::experiment::{stream_rng, Experiment, ExperimentConfig, ProblemConfig, ProblemInstance, Stream};
use snf_core::oracle::grid_posterior_check;
use snf_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "snf", version, about = "Stochastic normalizing flows for posterior sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all written files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Worker threads. All computation is currently serial.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Require byte-identical outputs for a given config and seed.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print a built-in experiment as TOML.
    Preset { name: Preset },
    /// Compare the closed-form posterior with grid quadrature (d <= 2).
    OracleCheck {
        #[arg(long, default_value_t = 400)]
        resolution: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train the configured chain; writes model.snf, loss.csv, resolved.toml.
    Train,
    /// Draw posterior samples from a trained model.
    Sample {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Observation, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "y_index")]
        y: Option<Vec<f64>>,
        /// Use the k-th test observation of the experiment instead of `--y`.
        #[arg(long)]
        y_index: Option<usize>,
        #[arg(long)]
        n: usize,
        /// Defaults to `<out-dir>/samples.csv`.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Score a model on the test observations; writes metrics.csv.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
    },
    /// Reference samples (analytic or MH) for one observation; writes baseline.csv.
    Baseline {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "y_index")]
        y: Option<Vec<f64>>,
        #[arg(long)]
        y_index: Option<usize>,
        /// Defaults to the evaluation sample count.
        #[arg(long)]
        n: Option<usize>,
        /// Also dump the evaluation-grid histogram to baseline_hist.csv.
        #[arg(long)]
        histogram: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Mixture,
    MixtureInn,
    MixedNoise,
    MixedNoiseInn,
}

impl Preset {
    fn config(self) -> ExperimentConfig {
        match self {
            Preset::Mixture => ExperimentConfig::mixture_desk(),
            Preset::MixtureInn => ExperimentConfig::mixture_desk_flow_only(),
            Preset::MixedNoise => ExperimentConfig::mixed_noise_desk(),
            Preset::MixedNoiseInn => ExperimentConfig::mixed_noise_desk_flow_only(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    ensure!(cli.threads >= 1, "--threads must be at least 1");
    match &cli.command {
        Command::Preset { name } => {
            print!("{}", to_toml(&name.config())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck { resolution, tolerance } => oracle_check(cli, *resolution, *tolerance),
        Command::Train => train(cli).map(|_| ExitCode::SUCCESS),
        Command::Sample { model, y, y_index, n, output } => {
            sample(cli, model, y.as_deref(), *y_index, *n, output.as_deref()).map(|_| ExitCode::SUCCESS)
        }
        Command::Evaluate { model } => evaluate(cli, model).map(|_| ExitCode::SUCCESS),
        Command::Baseline { y, y_index, n, histogram } => {
            baseline(cli, y.as_deref(), *y_index, *n, *histogram).map(|_| ExitCode::SUCCESS)
        }
    }
}

fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).context("serializing config")
}

/// Reads `--config`, applies `--seed` and validates before anything runs.
fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(cfg)
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    Ok(cli.out_dir.join(name))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn oracle_check(cli: &Cli, resolution: usize, tolerance: f64) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    if !matches!(cfg.problem, ProblemConfig::LinearGaussian { .. }) {
        bail!(CoreError::NotApplicable("the oracle check needs a linear problem with a mixture prior".into()));
    }
    let exp = Experiment::build(cfg)?;
    let ProblemInstance::Linear(problem) = &exp.problem else {
        unreachable!("checked above")
    };
    let ys = exp.test_observations(exp.config.evaluation.n_y, &mut exp.rng(Stream::Observations));
    let mut worst: f64 = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let r = grid_posterior_check(problem, y, resolution)?;
        println!("y[{i}] tv={:.3e} sup_density={:.3e} analytic_mass={:.12}", r.tv, r.sup_density, r.analytic_mass);
        worst = worst.max(r.tv);
    }
    if problem.operator().iter().all(|&a| a == 0.0) {
        let prior = problem.prior_mixture();
        let post = problem.analytic_posterior(&ys[0])?;
        let mut diff: f64 = 0.0;
        for k in 0..prior.num_components() {
            diff = diff.max((prior.weights()[k] - post.weights()[k]).abs());
            diff = diff.max((&prior.means().row(k) - &post.means().row(k)).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
            diff = diff.max((&prior.covs()[k] - &post.covs()[k]).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
        }
        println!("zero operator: posterior equals prior (max parameter difference {diff:.3e})");
    }
    if worst <= tolerance {
        println!("PASS, TV error {worst:.3e} <= {tolerance:e}");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL, TV error {worst:.3e} > {tolerance:e}");
        Ok(ExitCode::FAILURE)
    }
}

fn write_loss(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let resolved = out_path(cli, "resolved.toml")?;
    let mut header = format!("# threads = {}\n# deterministic = {}\n", cli.threads, cli.deterministic);
    header.push_str(&to_toml(&cfg)?);
    fs::write(&resolved, header).with_context(|| format!("writing {}", resolved.display()))?;

    let exp = Experiment::build(cfg)?;
    if let ProblemInstance::Mixed { surrogate, .. } = &exp.problem {
        eprintln!(
            "surrogate rmse: train {:.4}, held out {:.4}",
            surrogate.train_rmse, surrogate.heldout_rmse
        );
    }
    let mut chain = exp.new_chain()?;
    let loss_path = out_path(cli, "loss.csv")?;
    let report = match exp.train(&mut chain, &mut exp.rng(Stream::Training)) {
        Ok(r) => r,
        Err(CoreError::Diverged { step, loss, trace }) => {
            write_loss(&loss_path, &trace)?;
            bail!("training diverged at step {step} (loss {loss}); partial trace in {}", loss_path.display());
        }
        Err(e) => return Err(e.into()),
    };
    write_loss(&loss_path, &report.trace)?;
    let model_path = out_path(cli, "model.snf")?;
    let hash = model::save(&model_path, &exp.config, &chain)?;
    match (report.trace.first(), report.trace.last()) {
        (Some(a), Some(b)) => println!("trained {} steps: loss {a:.4} -> {b:.4}", report.trace.len()),
        _ => println!("no training steps; wrote the initial chain"),
    }
    println!("model {} sha256 {hash}", model_path.display());
    Ok(())
}

/// `--y`, or the `k`-th test observation of the experiment.
fn observation(exp: &Experiment, y: Option<&[f64]>, y_index: Option<usize>) -> Result<Vec<f64>> {
    if let Some(y) = y {
        ensure!(
            y.len() == exp.obs_dim(),
            "observation has {} entries, the problem expects {}",
            y.len(),
            exp.obs_dim()
        );
        return Ok(y.to_vec());
    }
    let k = y_index.unwrap_or(0);
    let ys = exp.test_observations(k + 1, &mut exp.rng(Stream::Observations));
    Ok(ys[k].clone())
}

fn write_samples(path: &Path, comments: &[String], xs: &Array2<f64>) -> Result<()> {
    let mut out = create(path)?;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record((1..=xs.ncols()).map(|j| format!("x{j}")))?;
    for row in xs.outer_iter() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

fn sample(
    cli: &Cli,
    model_path: &Path,
    y: Option<&[f64]>,
    y_index: Option<usize>,
    n: usize,
    output: Option<&Path>,
) -> Result<()> {
    let m = model::load(model_path)?;
    let exp = Experiment::build(m.config.clone())?;
    ensure!(
        m.chain.dim() == exp.dim() && m.chain.cond_dim() == exp.obs_dim(),
        "model/config mismatch: chain is {}x{}, problem is {}x{}",
        m.chain.dim(),
        m.chain.cond_dim(),
        exp.dim(),
        exp.obs_dim()
    );
    let y = observation(&exp, y, y_index)?;
    let seed = cli.seed.unwrap_or(m.config.seed);
    let xs = if n == 0 {
        Array2::zeros((0, exp.dim()))
    } else {
        exp.sample_posterior(&m.chain, &y, n, &mut stream_rng(seed, Stream::Sampling))?
    };
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => out_path(cli, "samples.csv")?,
    };
    let comments = [
        format!("model_sha256 = {}", m.sha256),
        format!("y = {}", join(&y)),
        format!("seed = {seed}"),
    ];
    write_samples(&path, &comments, &xs)?;
    println!("wrote {n} samples to {}", path.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    let (m, s) = r.mean_std();
    print!("{}: {m:.4} ± {s:.4}", r.metric);
    if let Some((fm, fs)) = r.floor_mean_std() {
        print!(", noise floor {fm:.4} ± {fs:.4}");
    }
    println!();
}

fn evaluate(cli: &Cli, model_path: &Path) -> Result<()> {
    let m = model::load(model_path)?;
    let mut cfg = m.config.clone();
    if cli.config.is_some() {
        let other = load_config(cli)?;
        ensure!(
            other.problem == cfg.problem && other.chain == cfg.chain,
            "model/config mismatch: the config describes a different problem or chain"
        );
        cfg.evaluation = other.evaluation;
        cfg.seed = other.seed;
    } else if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let exp = Experiment::build(cfg)?;
    let ys = exp.test_observations(exp.config.evaluation.n_y, &mut exp.rng(Stream::Observations));
    let report = exp.evaluate(&m.chain, &ys, &mut exp.rng(Stream::Evaluation))?;
    let path = out_path(cli, "metrics.csv")?;
    fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    print_report(&report);
    println!("wrote {}", path.display());
    Ok(())
}

fn baseline(cli: &Cli, y: Option<&[f64]>, y_index: Option<usize>, n: Option<usize>, histogram: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let exp = Experiment::build(cfg)?;
    let y = observation(&exp, y, y_index)?;
    let ev = &exp.config.evaluation;
    let n = n.unwrap_or(ev.samples);
    let xs = if n == 0 {
        Array2::zeros((0, exp.dim()))
    } else {
        exp.reference_samples(&y, n, &mut exp.rng(Stream::Sampling))?
    };
    let sampler = match exp.problem {
        ProblemInstance::Linear(_) => "analytic posterior".to_string(),
        ProblemInstance::Mixed { .. } => format!(
            "random-walk MH, {} steps, sigma {}, one chain per sample from the prior",
            ev.baseline_steps, ev.baseline_sigma
        ),
    };
    let path = out_path(cli, "baseline.csv")?;
    let comments = [
        format!("sampler = {sampler}"),
        format!("y = {}", join(&y)),
        format!("seed = {}", exp.config.seed),
    ];
    write_samples(&path, &comments, &xs)?;
    println!("wrote {n} reference samples to {}", path.display());
    if histogram {
        let grid = CubeGrid::new(exp.dim(), ev.grid_lo, ev.grid_hi, ev.grid_res)?;
        let h = CubeHistogram::from_points(grid, xs.view())?;
        let hp = out_path(cli, "baseline_hist.csv")?;
        h.write_csv(create(&hp)?)?;
        println!("wrote {}", hp.display());
    }
    Ok(())
}
