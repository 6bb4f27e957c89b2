use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snf_core::experiment::ExperimentConfig;
use tempfile::TempDir;

const TINY: &str = include_str!("../../../configs/tiny-2d.toml");

fn snf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snf")).args(args).output().expect("run snf")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The tiny config with fewer training steps.
fn quick(steps: usize) -> String {
    TINY.replace("steps = 200", &format!("steps = {steps}"))
}

fn train(dir: &Path, config: &str) -> PathBuf {
    let cfg = write_config(dir, "exp.toml", config);
    let out = dir.join("run");
    ok(&snf(&["train", "--config", s(&cfg), "--out-dir", s(&out)]));
    out
}

#[test]
fn oracle_check_passes_on_a_2d_mixture() {
    let d = TempDir::new().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let out = ok(&snf(&["oracle-check", "--config", s(&cfg)]));
    assert!(out.contains("PASS, TV error"), "{out}");
}

#[test]
fn oracle_check_with_zero_operator_reports_the_prior() {
    let d = TempDir::new().unwrap();
    let cfg = write_config(d.path(), "c.toml", &TINY.replace("operator_scale = 1.0", "operator_scale = 0.0"));
    let out = ok(&snf(&["oracle-check", "--config", s(&cfg)]));
    let diff: f64 = out
        .split("posterior equals prior (max parameter difference ")
        .nth(1)
        .and_then(|rest| rest.split(')').next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("{out}"));
    assert!(diff <= 1e-12, "{out}");
}

#[test]
fn oracle_check_rejects_non_mixture_problems() {
    let d = TempDir::new().unwrap();
    let text = ok(&snf(&["preset", "mixed-noise"]));
    let cfg = write_config(d.path(), "c.toml", &text);
    let out = snf(&["oracle-check", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not applicable"));
}

#[test]
fn presets_round_trip_through_toml() {
    for (name, want) in [
        ("mixture", ExperimentConfig::mixture_desk()),
        ("mixture-inn", ExperimentConfig::mixture_desk_flow_only()),
        ("mixed-noise", ExperimentConfig::mixed_noise_desk()),
        ("mixed-noise-inn", ExperimentConfig::mixed_noise_desk_flow_only()),
    ] {
        let text = ok(&snf(&["preset", name]));
        assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), want, "{name}");
    }
}

#[test]
fn invalid_config_fails_before_any_output() {
    let d = TempDir::new().unwrap();
    let out_dir = d.path().join("out");
    let bad = write_config(d.path(), "bad.toml", &TINY.replace("target_index = 4", "target_index = 5"));
    let out = snf(&["train", "--config", s(&bad), "--out-dir", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds horizon"));
    assert!(!out_dir.exists());

    let unknown = write_config(d.path(), "unknown.toml", &TINY.replace("[training]", "[training]\nmomentum = 0.9"));
    let out = snf(&["train", "--config", s(&unknown), "--out-dir", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
    assert!(!out_dir.exists());
}

#[test]
fn train_writes_artifacts_and_lowers_the_loss() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(60));
    for f in ["model.snf", "loss.csv", "resolved.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let vals: Vec<f64> = loss.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 60);
    let head: f64 = vals[..10].iter().sum();
    let tail: f64 = vals[50..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(0));
    assert!(run.join("model.snf").exists());
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), "step,loss\n");
}

#[test]
fn resolved_config_reproduces_the_model() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(15));
    let again = d.path().join("again");
    ok(&snf(&[
        "train",
        "--config",
        s(&run.join("resolved.toml")),
        "--out-dir",
        s(&again),
        "--deterministic",
    ]));
    for f in ["model.snf", "loss.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_and_is_recorded() {
    let d = TempDir::new().unwrap();
    let cfg = write_config(d.path(), "c.toml", &quick(3));
    let out = d.path().join("o");
    ok(&snf(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--seed", "99"]));
    assert!(fs::read_to_string(out.join("resolved.toml")).unwrap().contains("seed = 99"));
}

#[test]
fn sampling_is_reproducible_and_records_its_inputs() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(5));
    let model = run.join("model.snf");
    let a = d.path().join("a.csv");
    let b = d.path().join("b.csv");
    let c = d.path().join("c.csv");
    for (p, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&snf(&["sample", "--model", s(&model), "--y", "0.1,-0.2", "--n", "50", "--seed", seed, "--output", s(p)]));
    }
    let ta = fs::read_to_string(&a).unwrap();
    assert_eq!(ta, fs::read_to_string(&b).unwrap());
    assert_ne!(ta, fs::read_to_string(&c).unwrap());
    let lines: Vec<&str> = ta.lines().collect();
    assert!(lines[0].starts_with("# model_sha256 = "));
    assert_eq!(lines[1], "# y = 0.1,-0.2");
    assert_eq!(lines[2], "# seed = 3");
    assert_eq!(lines[3], "x1,x2");
    assert_eq!(lines.len(), 4 + 50);
}

#[test]
fn zero_samples_give_a_header_only_file() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(0));
    let p = d.path().join("s.csv");
    ok(&snf(&["sample", "--model", s(&run.join("model.snf")), "--y-index", "2", "--n", "0", "--output", s(&p)]));
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.ends_with("x1,x2\n"));
}

#[test]
fn identity_chain_samples_the_latent_gaussian() {
    let d = TempDir::new().unwrap();
    // one untrained flow: the identity map, so samples are N(0, I)
    let text = TINY
        .split("[[chain.layers]]")
        .take(2)
        .collect::<Vec<_>>()
        .join("[[chain.layers]]")
        .replace("horizon = 4", "horizon = 1")
        + "\n[training]\nlambda = 0.0\nbatch = 8\nsteps = 0\nlr = 0.001\n\n[evaluation]\nmetric = \"w1\"\nn_y = 1\nsamples = 10\n";
    let run = train(d.path(), &text);
    let p = d.path().join("s.csv");
    let n = 20_000;
    ok(&snf(&["sample", "--model", s(&run.join("model.snf")), "--y", "0.5,0.5", "--n", &n.to_string(), "--output", s(&p)]));
    let rows: Vec<Vec<f64>> = fs::read_to_string(&p)
        .unwrap()
        .lines()
        .skip(4)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), n);
    for j in 0..2 {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 5 standard errors
        assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }
    let cov = rows.iter().map(|r| r[0] * r[1]).sum::<f64>() / n as f64;
    assert!(cov.abs() < 5.0 / (n as f64).sqrt());
}

#[test]
fn sample_rejects_a_wrong_observation_length() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(0));
    let out = snf(&["sample", "--model", s(&run.join("model.snf")), "--y", "1,2,3", "--n", "3", "--out-dir", s(d.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("observation has 3 entries"));
}

#[test]
fn evaluate_writes_metrics_and_checks_the_config() {
    let d = TempDir::new().unwrap();
    let run = train(d.path(), &quick(30));
    let model = run.join("model.snf");
    let out = ok(&snf(&["evaluate", "--model", s(&model), "--out-dir", s(&run)]));
    assert!(out.contains("noise floor"));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("y_index,metric,value\n0,w1,"));
    assert!(csv.contains("\nmean,w1_floor,"));

    let other = write_config(d.path(), "other.toml", &TINY.replace("component_var = 0.05", "component_var = 0.06"));
    let out = snf(&["evaluate", "--model", s(&model), "--config", s(&other), "--out-dir", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model/config mismatch"));
}

#[test]
fn missing_or_corrupt_model_is_a_clear_error() {
    let d = TempDir::new().unwrap();
    let missing = d.path().join("nope.snf");
    let out = snf(&["evaluate", "--model", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reading model"));

    let run = train(d.path(), &quick(0));
    let model = run.join("model.snf");
    let mut bytes = fs::read(&model).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    let out = snf(&["sample", "--model", s(&model), "--y-index", "0", "--n", "1", "--out-dir", s(d.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn baseline_writes_reference_samples_and_histogram() {
    let d = TempDir::new().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let out_dir = d.path().join("b");
    ok(&snf(&["baseline", "--config", s(&cfg), "--n", "40", "--histogram", "--out-dir", s(&out_dir)]));
    let text = fs::read_to_string(out_dir.join("baseline.csv")).unwrap();
    assert!(text.starts_with("# sampler = analytic posterior\n# y = "));
    assert_eq!(text.lines().count(), 4 + 40);
    let hist = fs::read_to_string(out_dir.join("baseline_hist.csv")).unwrap();
    let total: u64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 40);
    // same config, same file
    let again = d.path().join("b2");
    ok(&snf(&["baseline", "--config", s(&cfg), "--n", "40", "--out-dir", s(&again)]));
    assert_eq!(text, fs::read_to_string(again.join("baseline.csv")).unwrap());
}
