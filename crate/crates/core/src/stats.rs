//! Two-sample checks used by the kernel validation suite.

use ndarray::ArrayView2;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub std_error: f64,
    pub p_value: f64,
}

/// Upper-tail p-value of a standard normal score.
pub fn normal_sf(z: f64) -> f64 {
    Normal::standard().sf(z)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linear-time energy-distance test of `Z_i = (X_i, X'_i)` against the swapped
/// pairs `W_i = (X'_i, X_i)`, i.e. of reversibility of the transition
/// `X -> X'` when `X` is drawn from its invariant law.
///
/// Disjoint index pairs `(2k, 2k+1)` give i.i.d. terms
/// `h = |Z_a - W_b| + |W_a - Z_b| - |Z_a - Z_b| - |W_a - W_b|`
/// whose mean is the energy distance between the laws of `Z` and `W`, zero
/// under reversibility. The p-value is one-sided from the normal approximation.
pub fn pair_swap_energy_test(x: ArrayView2<f64>, x_next: ArrayView2<f64>) -> Result<TestResult> {
    check_dim("paired samples", x.nrows(), x_next.nrows())?;
    check_dim("paired sample dimension", x.ncols(), x_next.ncols())?;
    let m = x.nrows() / 2;
    if m < 2 {
        return Err(Error::Empty);
    }
    let d = x.ncols();
    let mut z_a = vec![0.0; 2 * d];
    let mut w_a = vec![0.0; 2 * d];
    let mut z_b = vec![0.0; 2 * d];
    let mut w_b = vec![0.0; 2 * d];
    let fill = |z: &mut [f64], w: &mut [f64], i: usize| {
        for j in 0..d {
            z[j] = x[[i, j]];
            z[d + j] = x_next[[i, j]];
            w[j] = x_next[[i, j]];
            w[d + j] = x[[i, j]];
        }
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for k in 0..m {
        fill(&mut z_a, &mut w_a, 2 * k);
        fill(&mut z_b, &mut w_b, 2 * k + 1);
        let h = dist(&z_a, &w_b) + dist(&w_a, &z_b) - dist(&z_a, &z_b) - dist(&w_a, &w_b);
        sum += h;
        sum_sq += h * h;
    }
    let mf = m as f64;
    let mean = sum / mf;
    let var = (sum_sq - mf * mean * mean) / (mf - 1.0);
    let se = (var.max(0.0) / mf).sqrt();
    let p_value = if se > 0.0 {
        normal_sf(mean / se)
    } else if mean > 0.0 {
        0.0
    } else {
        1.0
    };
    Ok(TestResult {
        statistic: mean,
        std_error: se,
        p_value,
    })
}

/// Sample mean and its standard error.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
