//! Brute-force Bayes on a grid, used to check the closed-form posterior of
//! linear-Gaussian problems in one or two dimensions.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::problems::{InverseProblem, LinearGaussianProblem};
use crate::scalar::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Total variation between the two cell-mass vectors.
    pub tv: f64,
    /// Largest absolute difference of the normalized densities on the grid.
    pub sup_density: f64,
    /// Closed-form posterior mass captured by the grid box.
    pub analytic_mass: f64,
    pub cells: usize,
}

/// Compares `analytic_posterior(y)` with `p(y | x) p(x)` normalized by
/// midpoint quadrature on a `resolution^d` grid (`d <= 2`). The box covers
/// every posterior component with weight above `1e-14` out to 10 standard
/// deviations.
pub fn grid_posterior_check(problem: &LinearGaussianProblem<f64>, y: &[f64], resolution: usize) -> Result<OracleReport> {
    let prior = problem.prior_mixture();
    let d = prior.dim();
    if d == 0 || d > 2 {
        return Err(Error::NotApplicable(format!("grid oracle needs dimension 1 or 2, got {d}")));
    }
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let post = problem.analytic_posterior(y)?;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for k in 0..post.num_components() {
        if post.weights()[k] < 1e-14 {
            continue;
        }
        for j in 0..d {
            let s = post.covs()[k][[j, j]].sqrt();
            lo[j] = lo[j].min(post.means()[[k, j]] - 10.0 * s);
            hi[j] = hi[j].max(post.means()[[k, j]] + 10.0 * s);
        }
    }
    let h: Vec<f64> = (0..d).map(|j| (hi[j] - lo[j]) / resolution as f64).collect();
    let cells = resolution.pow(d as u32);
    let xs = Array2::from_shape_fn((cells, d), |(c, j)| {
        let idx = if j == 0 { c % resolution } else { c / resolution };
        lo[j] + (idx as f64 + 0.5) * h[j]
    });
    let ys = Array2::from_shape_fn((cells, y.len()), |(_, j)| y[j]);
    let area: f64 = h.iter().product();

    let unnorm: Array1<f64> =
        problem.log_likelihood_batch(xs.view(), ys.view()) + prior.log_density_batch(xs.view(), Array2::zeros((cells, 0)).view());
    let log_z = log_sum_exp(unnorm.as_slice().expect("contiguous")) + area.ln();
    let bayes = unnorm.mapv(|v| (v - log_z).exp());
    let closed = post.log_density_batch(xs.view(), Array2::zeros((cells, 0)).view()).mapv(f64::exp);

    let mut tv = 0.0;
    let mut sup: f64 = 0.0;
    for (p, q) in bayes.iter().zip(closed.iter()) {
        tv += (p - q).abs() * area;
        sup = sup.max((p - q).abs());
    }
    Ok(OracleReport {
        tv: 0.5 * tv,
        sup_density: sup,
        analytic_mass: closed.sum() * area,
        cells,
    })
}
