//! One-to-one assignment between predicted and ground-truth points.

use crate::labelgen::Point;

/// Outcome of matching predictions against ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(pred index, gt index, distance)`, sorted by gt index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }

    fn from_pairs(mut pairs: Vec<(usize, usize, f64)>, n_pred: usize, n_gt: usize) -> Self {
        pairs.sort_by_key(|p| p.1);
        let mut pred_used = vec![false; n_pred];
        let mut gt_used = vec![false; n_gt];
        for &(p, g, _) in &pairs {
            pred_used[p] = true;
            gt_used[g] = true;
        }
        MatchResult {
            pairs,
            unmatched_pred: (0..n_pred).filter(|&i| !pred_used[i]).collect(),
            unmatched_gt: (0..n_gt).filter(|&i| !gt_used[i]).collect(),
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column for an
/// `n x m` cost matrix with `n <= m` (shortest augmenting paths with
/// potentials). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= columns");
    // 1-based internals; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
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
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_of_row[row_of[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Hungarian on a rectangular matrix of either orientation; returns
/// `(row, col)` pairs.
fn assign(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows <= cols {
        hungarian(cost).into_iter().enumerate().collect()
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        hungarian(&t).into_iter().enumerate().map(|(c, r)| (r, c)).collect()
    }
}

/// Maximum-cardinality matching over admissible pairs
/// (`dist(pred, gt) <= radius[gt]`), ties broken by minimum total distance.
/// Solved independently on each connected component of the admissible graph.
pub fn match_within_radius(pred: &[Point], gt: &[Point], radius: &[f64]) -> MatchResult {
    assert_eq!(gt.len(), radius.len(), "one radius per gt point");
    let (np, ng) = (pred.len(), gt.len());
    let admissible = |p: usize, g: usize| {
        let d = pred[p].dist(&gt[g]);
        (d <= radius[g]).then_some(d)
    };

    // components over nodes 0..np (preds) and np..np+ng (gts)
    let mut parent: Vec<usize> = (0..np + ng).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for p in 0..np {
        for g in 0..ng {
            if admissible(p, g).is_some() {
                let (a, b) = (root(&mut parent, p), root(&mut parent, np + g));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut comp_preds: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for p in 0..np {
        let r = root(&mut parent, p);
        comp_preds.entry(r).or_default().0.push(p);
    }
    for g in 0..ng {
        let r = root(&mut parent, np + g);
        comp_preds.entry(r).or_default().1.push(g);
    }

    let mut pairs = Vec::new();
    for (ps, gs) in comp_preds.values() {
        if ps.is_empty() || gs.is_empty() {
            continue;
        }
        if ps.len() == 1 && gs.len() == 1 {
            if let Some(d) = admissible(ps[0], gs[0]) {
                pairs.push((ps[0], gs[0], d));
            }
            continue;
        }
        let d: Vec<Vec<Option<f64>>> = ps.iter().map(|&p| gs.iter().map(|&g| admissible(p, g)).collect()).collect();
        let total: f64 = d.iter().flatten().flatten().sum();
        // one inadmissible pair costs more than every admissible one together
        let big = 2.0 * total + 1.0;
        let cost: Vec<Vec<f64>> = d.iter().map(|row| row.iter().map(|x| x.unwrap_or(big)).collect()).collect();
        for (r, c) in assign(&cost, ps.len(), gs.len()) {
            if let Some(dist) = d[r][c] {
                pairs.push((ps[r], gs[c], dist));
            }
        }
    }
    MatchResult::from_pairs(pairs, np, ng)
}

/// Minimum total distance one-to-one matching with no admissibility limit;
/// matches `min(|pred|, |gt|)` pairs.
pub fn match_min_distance(pred: &[Point], gt: &[Point]) -> MatchResult {
    let cost: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| p.dist(g)).collect()).collect();
    let pairs = assign(&cost, pred.len(), gt.len())
        .into_iter()
        .map(|(p, g)| (p, g, cost[p][g]))
        .collect();
    MatchResult::from_pairs(pairs, pred.len(), gt.len())
}
