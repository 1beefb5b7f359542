//! Distances between persistence diagrams and Betti-curve correlation.
//!
//! Both metrics allow matching points to the diagonal. The bottleneck
//! distance binary-searches candidate costs with an augmenting-path perfect
//! matching test on the diagonal-augmented bipartite graph; Wasserstein uses
//! an exact Hungarian assignment on the (n+m) x (n+m) augmented cost matrix.
//! Essential classes: bottleneck requires equal counts per side and pairs
//! them by sorted births (a diagonal match would cost infinity); Wasserstein
//! truncates infinite deaths to the diagram's recorded truncation value.

use crate::error::{Error, Result};
use crate::persistence::{BettiCurve, PersistenceDiagram};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchTarget {
    /// Index into the diagram's pairs list.
    Point(usize),
    Diagonal,
}

/// A matching achieving a reported distance. Every off-diagonal point of each
/// diagram appears exactly once on its side.
#[derive(Debug, Clone)]
pub struct MatchingResult {
    pub cost: f64,
    pub pairs: Vec<(MatchTarget, MatchTarget)>,
}

impl MatchingResult {
    /// True when each diagram point appears exactly once on its side.
    pub fn covers(&self, n_a: usize, n_b: usize) -> bool {
        let mut seen_a = vec![false; n_a];
        let mut seen_b = vec![false; n_b];
        for &(l, r) in &self.pairs {
            if let MatchTarget::Point(i) = l {
                if i >= n_a || seen_a[i] {
                    return false;
                }
                seen_a[i] = true;
            }
            if let MatchTarget::Point(j) = r {
                if j >= n_b || seen_b[j] {
                    return false;
                }
                seen_b[j] = true;
            }
        }
        seen_a.into_iter().all(|x| x) && seen_b.into_iter().all(|x| x)
    }
}

fn linf(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// L-infinity distance from a finite point to the diagonal.
fn diag_radius(p: (f64, f64)) -> f64 {
    (p.1 - p.0) / 2.0
}

fn check_dims(a: &PersistenceDiagram, b: &PersistenceDiagram) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!(
            "diagram dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

/// Bottleneck distance with a matching that achieves it. Unequal essential
/// counts make the distance infinite; the matching then sends the surplus to
/// the diagonal.
pub fn bottleneck_distance(
    a: &PersistenceDiagram,
    b: &PersistenceDiagram,
) -> Result<(f64, MatchingResult)> {
    check_dims(a, b)?;
    let (a_fin, a_ess) = split_indices(a);
    let (b_fin, b_ess) = split_indices(b);

    let mut pairs: Vec<(MatchTarget, MatchTarget)> = Vec::new();

    // Essential classes pair by sorted births, optimal for the max cost.
    let mut ea: Vec<(f64, usize)> = a_ess.iter().map(|&i| (a.pairs[i].0, i)).collect();
    let mut eb: Vec<(f64, usize)> = b_ess.iter().map(|&i| (b.pairs[i].0, i)).collect();
    ea.sort_by(|x, y| x.0.total_cmp(&y.0));
    eb.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ess_cost: f64 = 0.0;
    let k = ea.len().min(eb.len());
    for t in 0..k {
        ess_cost = ess_cost.max((ea[t].0 - eb[t].0).abs());
        pairs.push((MatchTarget::Point(ea[t].1), MatchTarget::Point(eb[t].1)));
    }
    for &(_, i) in &ea[k..] {
        pairs.push((MatchTarget::Point(i), MatchTarget::Diagonal));
    }
    for &(_, i) in &eb[k..] {
        pairs.push((MatchTarget::Diagonal, MatchTarget::Point(i)));
    }
    if ea.len() != eb.len() {
        ess_cost = f64::INFINITY;
    }

    // Finite part: smallest feasible candidate cost.
    let ap: Vec<(f64, f64)> = a_fin.iter().map(|&i| a.pairs[i]).collect();
    let bp: Vec<(f64, f64)> = b_fin.iter().map(|&i| b.pairs[i]).collect();
    let mut candidates: Vec<f64> = vec![0.0];
    for &p in &ap {
        candidates.push(diag_radius(p));
        for &q in &bp {
            candidates.push(linf(p, q));
        }
    }
    for &q in &bp {
        candidates.push(diag_radius(q));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(&ap, &bp, candidates[mid]).is_some() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let eps = candidates[lo];
    let matching =
        feasible(&ap, &bp, eps).expect("largest candidate cost is always feasible");
    let (n, m) = (ap.len(), bp.len());
    for i in 0..n {
        match matching[i] {
            Some(j) if j < m => pairs.push((
                MatchTarget::Point(a_fin[i]),
                MatchTarget::Point(b_fin[j]),
            )),
            _ => pairs.push((MatchTarget::Point(a_fin[i]), MatchTarget::Diagonal)),
        }
    }
    let mut b_hit = vec![false; m];
    for &slot in &matching[..n] {
        if let Some(j) = slot {
            if j < m {
                b_hit[j] = true;
            }
        }
    }
    for j in 0..m {
        if !b_hit[j] {
            pairs.push((MatchTarget::Diagonal, MatchTarget::Point(b_fin[j])));
        }
    }
    let cost = ess_cost.max(eps);
    Ok((cost, MatchingResult { cost, pairs }))
}

fn split_indices(d: &PersistenceDiagram) -> (Vec<usize>, Vec<usize>) {
    let mut fin = Vec::new();
    let mut ess = Vec::new();
    for (i, &(_, death)) in d.pairs.iter().enumerate() {
        if death.is_finite() {
            fin.push(i);
        } else {
            ess.push(i);
        }
    }
    (fin, ess)
}

/// Perfect-matching feasibility at cost bound eps on the augmented graph:
/// left = a-points then diagonal slots for b, right = b-points then diagonal
/// slots for a. Returns the match of each a-point (index < m means a b-point,
/// otherwise its diagonal slot) when a perfect matching exists.
#[allow(clippy::needless_range_loop)]
fn feasible(ap: &[(f64, f64)], bp: &[(f64, f64)], eps: f64) -> Option<Vec<Option<usize>>> {
    let (n, m) = (ap.len(), bp.len());
    let left_n = n + m;
    let right_n = m + n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); left_n];
    for i in 0..n {
        for j in 0..m {
            if linf(ap[i], bp[j]) <= eps {
                adj[i].push(j);
            }
        }
        if diag_radius(ap[i]) <= eps {
            adj[i].push(m + i);
        }
    }
    for j in 0..m {
        if diag_radius(bp[j]) <= eps {
            adj[n + j].push(j);
        }
        // Diagonal slots absorb each other at zero cost.
        for i in 0..n {
            adj[n + j].push(m + i);
        }
    }
    let mut match_right: Vec<Option<usize>> = vec![None; right_n];
    let mut match_left: Vec<Option<usize>> = vec![None; left_n];
    let mut visited = vec![0u32; right_n];
    let mut stamp = 0u32;
    for l in 0..left_n {
        stamp += 1;
        if !augment(l, &adj, &mut match_left, &mut match_right, &mut visited, stamp) {
            return None;
        }
    }
    Some((0..n).map(|i| match_left[i]).collect())
}

fn augment(
    l: usize,
    adj: &[Vec<usize>],
    match_left: &mut Vec<Option<usize>>,
    match_right: &mut Vec<Option<usize>>,
    visited: &mut Vec<u32>,
    stamp: u32,
) -> bool {
    for &r in &adj[l] {
        if visited[r] == stamp {
            continue;
        }
        visited[r] = stamp;
        let free = match match_right[r] {
            None => true,
            Some(other) => augment(other, adj, match_left, match_right, visited, stamp),
        };
        if free {
            match_right[r] = Some(l);
            match_left[l] = Some(r);
            return true;
        }
    }
    false
}

/// q-Wasserstein distance (L-infinity ground metric) with an optimal
/// matching. Infinite deaths are truncated to each diagram's recorded
/// truncation value; essential classes without one are an error.
#[allow(clippy::needless_range_loop)]
pub fn wasserstein_distance(
    a: &PersistenceDiagram,
    b: &PersistenceDiagram,
    q: f64,
) -> Result<(f64, MatchingResult)> {
    check_dims(a, b)?;
    if !q.is_finite() || q < 1.0 {
        return Err(Error::invalid(format!("order q must be >= 1, got {q}")));
    }
    let at = a.truncated()?;
    let bt = b.truncated()?;
    let (n, m) = (at.pairs.len(), bt.pairs.len());
    if n + m == 0 {
        return Ok((
            0.0,
            MatchingResult {
                cost: 0.0,
                pairs: Vec::new(),
            },
        ));
    }
    let size = n + m;
    let mut cost = vec![vec![0.0f64; size]; size];
    for i in 0..n {
        for j in 0..m {
            cost[i][j] = linf(at.pairs[i], bt.pairs[j]).powf(q);
        }
        let r = diag_radius(at.pairs[i]).powf(q);
        for k in m..size {
            cost[i][k] = r;
        }
    }
    for j in 0..m {
        let r = diag_radius(bt.pairs[j]).powf(q);
        for k in n..size {
            cost[k][j] = r;
        }
    }
    let assignment = hungarian_min(&cost);
    let mut terms = Vec::with_capacity(size);
    let mut pairs = Vec::new();
    for (i, &j) in assignment.iter().enumerate() {
        terms.push(cost[i][j]);
        match (i < n, j < m) {
            (true, true) => pairs.push((MatchTarget::Point(i), MatchTarget::Point(j))),
            (true, false) => pairs.push((MatchTarget::Point(i), MatchTarget::Diagonal)),
            (false, true) => pairs.push((MatchTarget::Diagonal, MatchTarget::Point(j))),
            (false, false) => {}
        }
    }
    // Summing in sorted order makes the total independent of argument order,
    // so the distance is exactly symmetric.
    terms.sort_by(f64::total_cmp);
    let total: f64 = terms.iter().sum();
    let dist = total.powf(1.0 / q);
    Ok((
        dist,
        MatchingResult {
            cost: dist,
            pairs,
        },
    ))
}

/// Exact minimum-cost assignment on a square matrix via the O(n^3)
/// shortest-augmenting-path algorithm with potentials. Returns the column
/// assigned to each row.
pub(crate) fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    debug_assert!(cost.iter().all(|row| row.len() == n));
    // 1-based arrays; p[j] = row matched to column j, p[0] = current row.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Re-evaluates a bottleneck matching: max pair cost, with essential points
/// (infinite death) matched to the diagonal costing infinity.
pub fn bottleneck_matching_cost(
    a: &PersistenceDiagram,
    b: &PersistenceDiagram,
    m: &MatchingResult,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &(l, r) in &m.pairs {
        let c = match (l, r) {
            (MatchTarget::Point(i), MatchTarget::Point(j)) => {
                let (pa, pb) = (a.pairs[i], b.pairs[j]);
                match (pa.1.is_finite(), pb.1.is_finite()) {
                    (true, true) => linf(pa, pb),
                    (false, false) => (pa.0 - pb.0).abs(),
                    _ => f64::INFINITY,
                }
            }
            (MatchTarget::Point(i), MatchTarget::Diagonal) => {
                let pa = a.pairs[i];
                if pa.1.is_finite() {
                    diag_radius(pa)
                } else {
                    f64::INFINITY
                }
            }
            (MatchTarget::Diagonal, MatchTarget::Point(j)) => {
                let pb = b.pairs[j];
                if pb.1.is_finite() {
                    diag_radius(pb)
                } else {
                    f64::INFINITY
                }
            }
            (MatchTarget::Diagonal, MatchTarget::Diagonal) => 0.0,
        };
        worst = worst.max(c);
    }
    worst
}

/// Re-evaluates a Wasserstein matching on the truncated diagrams.
pub fn wasserstein_matching_cost(
    a: &PersistenceDiagram,
    b: &PersistenceDiagram,
    q: f64,
    m: &MatchingResult,
) -> Result<f64> {
    let at = a.truncated()?;
    let bt = b.truncated()?;
    let mut terms = Vec::with_capacity(m.pairs.len());
    for &(l, r) in &m.pairs {
        let c = match (l, r) {
            (MatchTarget::Point(i), MatchTarget::Point(j)) => linf(at.pairs[i], bt.pairs[j]),
            (MatchTarget::Point(i), MatchTarget::Diagonal) => diag_radius(at.pairs[i]),
            (MatchTarget::Diagonal, MatchTarget::Point(j)) => diag_radius(bt.pairs[j]),
            (MatchTarget::Diagonal, MatchTarget::Diagonal) => 0.0,
        };
        terms.push(c.powf(q));
    }
    // Same sorted accumulation as `wasserstein_distance`.
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>().powf(1.0 / q))
}

/// Pearson correlation of two Betti curves on the same grid.
pub fn betti_correlation(a: &BettiCurve, b: &BettiCurve) -> Result<f64> {
    if a.grid.len() != b.grid.len() || a.grid.iter().zip(&b.grid).any(|(x, y)| x != y) {
        return Err(Error::invalid("betti curves sampled on different grids"));
    }
    let n = a.counts.len() as f64;
    let xs = a.counts.iter().map(|&c| c as f64);
    let ys = b.counts.iter().map(|&c| c as f64);
    let mx = xs.clone().sum::<f64>() / n;
    let my = ys.clone().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a betti curve is constant over the grid".to_string(),
        ));
    }
    // Identical curves correlate at exactly 1; don't let sqrt rounding
    // shave the last bit off.
    if a.counts == b.counts {
        return Ok(1.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Default comparison grid: 64 uniform samples spanning the union of both
/// diagrams' coordinate ranges (truncation stands in for infinite deaths).
pub fn default_betti_grid(a: &PersistenceDiagram, b: &PersistenceDiagram) -> Result<Vec<f64>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for d in [a, b] {
        for &(birth, death) in &d.pairs {
            lo = lo.min(birth);
            hi = hi.max(birth);
            if death.is_finite() {
                lo = lo.min(death);
                hi = hi.max(death);
            } else if let Some(t) = d.truncation {
                hi = hi.max(t);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("cannot build a grid over empty diagrams"));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    const POINTS: usize = 64;
    Ok((0..POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (POINTS - 1) as f64)
        .collect())
}
