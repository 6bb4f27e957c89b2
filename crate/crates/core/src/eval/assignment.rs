//! Exact linear assignment by shortest augmenting paths with dual potentials.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`.
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost matching of every row to a distinct column (`rows <= cols`).
///
/// O(rows² · cols). Each row is inserted by a Dijkstra-like search over
/// reduced costs; the potentials keep reduced costs non-negative.
pub fn solve_assignment(cost: ArrayView2<f64>) -> Result<Assignment> {
    let (n, m) = cost.dim();
    if n > m {
        return Err(Error::Config(format!("assignment needs rows <= cols, got {n} x {m}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    if n == 0 {
        return Ok(Assignment { row_to_col: Vec::new(), cost: 0.0 });
    }
    let c = cost.as_standard_layout();
    let c = c.as_slice().expect("standard layout");

    // 1-based rows/cols; column 0 is a virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &c[(i0 - 1) * m..i0 * m];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    let total = row_to_col.iter().enumerate().map(|(i, &j)| c[i * m + j]).sum();
    Ok(Assignment { row_to_col, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(c: &Array2<f64>) -> f64 {
        fn rec(c: &Array2<f64>, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == c.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..c.ncols() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(c[[i, j]] + rec(c, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(c, 0, &mut vec![false; c.ncols()])
    }

    #[test]
    fn textbook_example() {
        let c = arr2(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]);
        let a = solve_assignment(c.view()).unwrap();
        assert_eq!(a.cost, 5.0);
        assert_eq!(a.row_to_col, vec![1, 0, 2]);
    }

    #[test]
    fn matches_enumeration_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(n..=7);
            let c = Array2::from_shape_simple_fn((n, m), || rng.random_range(-5.0..5.0));
            let a = solve_assignment(c.view()).unwrap();
            assert!((a.cost - brute(&c)).abs() < 1e-12);
            let mut cols = a.row_to_col.clone();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), n);
        }
    }

    #[test]
    fn rejects_tall_and_non_finite() {
        assert!(solve_assignment(Array2::zeros((3, 2)).view()).is_err());
        let c = arr2(&[[f64::NAN]]);
        assert!(matches!(solve_assignment(c.view()), Err(Error::NonFinite(_))));
    }
}
