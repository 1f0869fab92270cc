//! Minimum-cost one-to-one assignment with a deterministic tie-break.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl MatchResult {
    pub fn empty() -> Self {
        MatchResult { pairs: Vec::new(), cost: 0.0 }
    }

    /// GT index per query, `None` for unmatched queries.
    pub fn assignment(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Shortest-augmenting-path assignment of every row to a distinct column;
/// requires `rows.len() <= cols.len()`. Returns the chosen column per row.
fn assign_rows(c: &dyn Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

/// Optimal value of a maximum-cardinality matching between `qs` and `gs`.
fn optimum(cost: &Tensor, qs: &[usize], gs: &[usize]) -> f64 {
    if qs.is_empty() || gs.is_empty() {
        return 0.0;
    }
    let m = cost.shape()[1];
    let d = cost.data();
    if qs.len() <= gs.len() {
        let a = assign_rows(&|q, g| d[q * m + g], qs, gs);
        qs.iter().zip(&a).map(|(&q, &g)| d[q * m + g]).sum()
    } else {
        let a = assign_rows(&|g, q| d[q * m + g], gs, qs);
        gs.iter().zip(&a).map(|(&g, &q)| d[q * m + g]).sum()
    }
}

fn same_cost(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Minimum-cost matching of `min(n, m)` pairs on an n×m cost matrix. Among
/// optimal assignments the lexicographically smallest query-sorted pair list
/// is returned.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let (n, m) = cost.dims2();
    if let Some(i) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry ({}, {})", i / m.max(1), i % m.max(1))));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult::empty());
    }
    let d = cost.data();
    let target = n.min(m);
    let all_q: Vec<usize> = (0..n).collect();
    let all_g: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_q, &all_g);

    // fix pairs one at a time, smallest feasible (query, gt) first
    let mut pairs = Vec::with_capacity(target);
    let mut acc = 0.0;
    let mut qs = all_q;
    let mut gs = all_g;
    while pairs.len() < target {
        let need = target - pairs.len() - 1;
        let mut chosen = None;
        'search: for (qi, &q) in qs.iter().enumerate() {
            let rest_q = &qs[qi + 1..];
            if rest_q.len() < need {
                break;
            }
            for (gi, &g) in gs.iter().enumerate() {
                let rest_g: Vec<usize> = gs.iter().enumerate().filter(|&(k, _)| k != gi).map(|(_, &x)| x).collect();
                if rest_g.len() < need {
                    continue;
                }
                let total = acc + d[q * m + g] + optimum(cost, rest_q, &rest_g);
                if same_cost(total, best) {
                    chosen = Some((qi, gi));
                    break 'search;
                }
            }
        }
        let (qi, gi) = chosen.expect("an optimal completion always exists");
        let (q, g) = (qs[qi], gs[gi]);
        acc += d[q * m + g];
        pairs.push((q, g));
        qs.drain(..=qi);
        gs.remove(gi);
    }
    let cost_sum = pairs.iter().map(|&(q, g)| d[q * m + g]).sum();
    Ok(MatchResult { pairs, cost: cost_sum })
}
