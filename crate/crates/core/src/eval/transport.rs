//! Transportation simplex for discrete optimal transport between weighted
//! point sets of arbitrary (possibly unequal) sizes.

use std::collections::VecDeque;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Basic cells `(i, j, mass)`; cells with zero mass are omitted.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

fn normalized(w: &[f64], what: &str) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::Empty);
    }
    if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Config(format!("{what} masses must be positive and finite")));
    }
    let s: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / s).collect())
}

/// Minimum of `Σ c_ij π_ij` over couplings of `a` and `b`. Both mass vectors
/// are normalised to 1 first.
pub fn solve_transport(a: &[f64], b: &[f64], cost: ArrayView2<f64>) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m {
        return Err(Error::Dimension {
            context: "transport marginals",
            expected: n * m,
            got: a.len() * b.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("transport cost matrix".into()));
    }
    let mut supply = normalized(a, "source")?;
    let mut demand = normalized(b, "target")?;

    // North-west corner start: exactly n + m - 1 basic cells, a spanning tree
    // on the bipartite row/column graph.
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        let q = supply[i].min(demand[j]);
        cells.push((i, j));
        flow.push(q);
        supply[i] -= q;
        demand[j] -= q;
        if i == n - 1 {
            j += 1;
        } else if j == m - 1 || supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(cells.len(), n + m - 1);

    let scale = cost.iter().fold(0.0f64, |s, c| s.max(c.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let max_iter = 50 * (n + m) * (n + m) + 1000;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];

    for _ in 0..max_iter {
        for a in adj.iter_mut() {
            a.clear();
        }
        for (k, &(i, j)) in cells.iter().enumerate() {
            adj[i].push((n + j, k));
            adj[n + j].push((i, k));
        }
        // duals from u_0 = 0 along the tree
        let mut seen = vec![false; n + m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        u[0] = 0.0;
        while let Some(node) = queue.pop_front() {
            for &(nb, k) in &adj[node] {
                if seen[nb] {
                    continue;
                }
                seen[nb] = true;
                let (ci, cj) = cells[k];
                if nb >= n {
                    v[nb - n] = cost[[ci, cj]] - u[ci];
                } else {
                    u[nb] = cost[[ci, cj]] - v[cj];
                }
                queue.push_back(nb);
            }
        }

        let mut best = (-tol, usize::MAX, usize::MAX);
        for i in 0..n {
            for j in 0..m {
                let rc = cost[[i, j]] - u[i] - v[j];
                if rc < best.0 {
                    best = (rc, i, j);
                }
            }
        }
        if best.1 == usize::MAX {
            let total = cells.iter().zip(&flow).map(|(&(i, j), &f)| f * cost[[i, j]]).sum();
            let flows = cells
                .iter()
                .zip(&flow)
                .filter(|(_, &f)| f > 0.0)
                .map(|(&(i, j), &f)| (i, j, f))
                .collect();
            return Ok(TransportPlan { flows, cost: total });
        }
        let (_, ei, ej) = best;

        // tree path from row ei to column ej; with the entering cell it closes a cycle
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
        let mut seen = vec![false; n + m];
        let mut queue = VecDeque::from([ei]);
        seen[ei] = true;
        while let Some(node) = queue.pop_front() {
            if node == n + ej {
                break;
            }
            for &(nb, k) in &adj[node] {
                if !seen[nb] {
                    seen[nb] = true;
                    parent[nb] = Some((node, k));
                    queue.push_back(nb);
                }
            }
        }
        // walking back from column ej, cells alternate -, +, -, ...
        let mut path = Vec::new();
        let mut node = n + ej;
        while node != ei {
            let (prev, k) = parent[node].expect("basis is a spanning tree");
            path.push(k);
            node = prev;
        }
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for &k in path.iter().step_by(2) {
            if flow[k] < theta {
                theta = flow[k];
                leave = k;
            }
        }
        for (p, &k) in path.iter().enumerate() {
            if p % 2 == 0 {
                flow[k] = (flow[k] - theta).max(0.0);
            } else {
                flow[k] += theta;
            }
        }
        cells[leave] = (ei, ej);
        flow[leave] = theta;
    }
    Err(Error::Config("transport simplex did not converge".into()))
}
