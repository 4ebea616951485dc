//! k-means on weight rows.
//!
//! [`kmeans_hartigan`] is the production path: k-means++ seeding followed by
//! Hartigan single-point moves, at most `max_sweeps` passes over the rows,
//! each pass costing `O(mkp)`. [`kmeans_exact`] enumerates every partition of
//! at most [`EXACT_MAX_ROWS`] rows into exactly `k` blocks and serves as the
//! global-optimum oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::projection::{cluster_means, ClusterAssignment};
use crate::sum::{squared_distance, CompensatedSum};

pub const DEFAULT_MAX_SWEEPS: usize = 10;

/// Largest row count accepted by [`kmeans_exact`].
pub const EXACT_MAX_ROWS: usize = 12;

/// Relative slack below which a Hartigan move is not worth taking.
const MOVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Canonical (first-appearance) labels.
    pub assignment: ClusterAssignment,
    /// Within-cluster sum of squares, recomputed from `assignment`.
    pub wcss: f64,
    pub sweeps_used: usize,
    /// WCSS of the starting assignment followed by the WCSS after each sweep.
    pub sweep_wcss: Vec<f64>,
}

impl KMeansResult {
    fn from_assignment(
        w: &WeightMatrix,
        a: ClusterAssignment,
        sweeps: usize,
        history: Vec<f64>,
    ) -> Result<Self> {
        let assignment = a.canonical();
        let wcss = wcss(w, &assignment)?;
        Ok(Self {
            assignment,
            wcss,
            sweeps_used: sweeps,
            sweep_wcss: history,
        })
    }
}

/// `Σ_j Σ_{i∈S_j} ‖w(i) − μ_j‖²`.
pub fn wcss(w: &WeightMatrix, a: &ClusterAssignment) -> Result<f64> {
    let means = cluster_means(a, w)?;
    let mut total = CompensatedSum::new();
    for (i, &l) in a.labels().iter().enumerate() {
        for (x, mu) in w.row(i).iter().zip(means.row(l)) {
            let d = x - mu;
            total.add(d * d);
        }
    }
    Ok(total.value())
}

fn check_k(w: &WeightMatrix, k: usize) -> Result<()> {
    if k == 0 || k > w.rows() {
        return Err(Error::InvalidK { k, m: w.rows() });
    }
    Ok(())
}

/// k-means++ seeding: first center uniform, later centers drawn with
/// probability proportional to squared distance from the nearest center.
///
/// Every center row is labelled with its own cluster, so no cluster is empty.
/// Remaining rows go to the nearest center, lowest center index on ties.
pub fn init_assignment(w: &WeightMatrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    check_k(w, k)?;
    let m = w.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut center_of = vec![usize::MAX; m];
    let mut centers = Vec::with_capacity(k);
    let first = rng.random_range(0..m);
    centers.push(first);
    center_of[first] = 0;

    let mut d2: Vec<f64> = (0..m).map(|i| squared_distance(w.row(i), w.row(first))).collect();

    while centers.len() < k {
        let total: f64 = (0..m)
            .filter(|&i| center_of[i] == usize::MAX)
            .map(|i| d2[i])
            .sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in (0..m).filter(|&i| center_of[i] == usize::MAX && d2[i] > 0.0) {
                acc += d2[i];
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive mass implies a candidate")
        } else {
            // every remaining row coincides with a center
            let free: Vec<usize> = (0..m).filter(|&i| center_of[i] == usize::MAX).collect();
            free[rng.random_range(0..free.len())]
        };
        center_of[next] = centers.len();
        centers.push(next);
        for (i, best) in d2.iter_mut().enumerate() {
            *best = best.min(squared_distance(w.row(i), w.row(next)));
        }
    }

    let labels = (0..m)
        .map(|i| {
            if center_of[i] != usize::MAX {
                return center_of[i];
            }
            let mut best = (f64::INFINITY, 0);
            for (j, &c) in centers.iter().enumerate() {
                let d = squared_distance(w.row(i), w.row(c));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    Ok(ClusterAssignment::new(labels, k)?.canonical())
}

/// Seeded k-means++ followed by Hartigan refinement.
pub fn kmeans_hartigan(w: &WeightMatrix, k: usize, seed: u64, max_sweeps: usize) -> Result<KMeansResult> {
    let init = init_assignment(w, k, seed)?;
    hartigan_refine(w, init, max_sweeps)
}

/// Best of `restarts` seeded runs: lowest WCSS, then lowest restart index.
///
/// Restart 0 uses `seed` itself, so `restarts = 1` equals [`kmeans_hartigan`].
pub fn kmeans_hartigan_restarts(
    w: &WeightMatrix,
    k: usize,
    seed: u64,
    max_sweeps: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    check_k(w, k)?;
    let runs: Vec<KMeansResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| kmeans_hartigan(w, k, restart_seed(seed, r), max_sweeps))
        .collect::<Result<_>>()?;
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.wcss < best.wcss { r } else { best })
        .expect("at least one restart"))
}

fn restart_seed(seed: u64, restart: u64) -> u64 {
    seed.wrapping_add(restart.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Hartigan local search from `init`.
///
/// Rows are scanned in ascending order. Moving row `w` from cluster `a` to
/// `b` changes the WCSS by
/// `|S_b|/(|S_b|+1)·‖w−μ_b‖² − |S_a|/(|S_a|−1)·‖w−μ_a‖²`; the most negative
/// target (lowest id on ties) is taken when it beats the tolerance. Rows in
/// singleton clusters never move. Stops after a sweep without moves or after
/// `max_sweeps` sweeps. WCSS never increases, so a warm start bounds the
/// result by the starting WCSS.
pub fn hartigan_refine(w: &WeightMatrix, init: ClusterAssignment, max_sweeps: usize) -> Result<KMeansResult> {
    if init.m() != w.rows() {
        return Err(Error::Shape(format!(
            "assignment covers {} rows but matrix has {}",
            init.m(),
            w.rows()
        )));
    }
    let (m, p, k) = (w.rows(), w.cols(), init.k());
    let mut labels = init.labels().to_vec();
    let mut history = vec![wcss(w, &init)?];
    let mut sweeps = 0;

    let mut sums = vec![0.0; k * p];
    let mut means = vec![0.0; k * p];
    let mut sizes = vec![0usize; k];

    while sweeps < max_sweeps {
        // rebuild from scratch each sweep so incremental updates never drift
        sums.iter_mut().for_each(|s| *s = 0.0);
        sizes.iter_mut().for_each(|s| *s = 0);
        for (i, &l) in labels.iter().enumerate() {
            sizes[l] += 1;
            for (s, &v) in sums[l * p..(l + 1) * p].iter_mut().zip(w.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            refresh_mean(&sums, &mut means, &sizes, c, p);
        }

        let tol = MOVE_TOL * history.last().copied().unwrap_or(0.0).max(1.0);
        let mut moved = false;
        // labels change mid-scan, so index rather than iterate
        #[allow(clippy::needless_range_loop)]
        for i in 0..m {
            let a = labels[i];
            if sizes[a] == 1 {
                continue;
            }
            let row = w.row(i);
            let na = sizes[a] as f64;
            let remove = na / (na - 1.0) * plain_dist2(row, &means[a * p..(a + 1) * p]);

            // only targets whose insertion cost undercuts removal by > tol matter
            let mut bound = remove - tol;
            let mut target = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = sizes[b] as f64;
                let factor = nb / (nb + 1.0);
                if let Some(add) = bounded_dist2(row, &means[b * p..(b + 1) * p], factor, bound) {
                    bound = add;
                    target = Some(b);
                }
            }
            if let Some(b) = target {
                for (s, &v) in sums[a * p..(a + 1) * p].iter_mut().zip(row) {
                    *s -= v;
                }
                for (s, &v) in sums[b * p..(b + 1) * p].iter_mut().zip(row) {
                    *s += v;
                }
                sizes[a] -= 1;
                sizes[b] += 1;
                refresh_mean(&sums, &mut means, &sizes, a, p);
                refresh_mean(&sums, &mut means, &sizes, b, p);
                labels[i] = b;
                moved = true;
            }
        }
        sweeps += 1;
        let current = ClusterAssignment::new(labels.clone(), k)?;
        history.push(wcss(w, &current)?);
        if !moved {
            break;
        }
    }

    let assignment = ClusterAssignment::new(labels, k)?;
    KMeansResult::from_assignment(w, assignment, sweeps, history)
}

fn refresh_mean(sums: &[f64], means: &mut [f64], sizes: &[usize], c: usize, p: usize) {
    let n = sizes[c] as f64;
    for (mu, &s) in means[c * p..(c + 1) * p]
        .iter_mut()
        .zip(&sums[c * p..(c + 1) * p])
    {
        *mu = s / n;
    }
}

#[inline]
fn plain_dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `factor · ‖a − b‖²` if it is strictly below `bound`, else `None`.
/// Abandons the accumulation as soon as the bound is reached.
#[inline]
fn bounded_dist2(a: &[f64], b: &[f64], factor: f64, bound: f64) -> Option<f64> {
    if bound <= 0.0 {
        return None;
    }
    let limit = bound / factor;
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(16).zip(b.chunks(16)) {
        acc += plain_dist2(ca, cb);
        if acc >= limit {
            return None;
        }
    }
    let v = factor * acc;
    (v < bound).then_some(v)
}

/// Globally optimal k-means by exhaustive enumeration of set partitions.
///
/// Partitions are visited as restricted growth strings in lexicographic
/// order, with branch-and-bound on the accumulated cost. A later partition
/// replaces the incumbent only if it is better by more than
/// `1e-12·max(1, best)`, so among (numerical) ties the lexicographically
/// smallest canonical labelling wins.
pub fn kmeans_exact(w: &WeightMatrix, k: usize) -> Result<KMeansResult> {
    let m = w.rows();
    if m > EXACT_MAX_ROWS {
        return Err(Error::InstanceTooLarge {
            m,
            max: EXACT_MAX_ROWS,
        });
    }
    check_k(w, k)?;
    let p = w.cols();
    let mut search = ExactSearch {
        w,
        k,
        p,
        labels: vec![0; m],
        sums: vec![0.0; k * p],
        sizes: vec![0; k],
        best_cost: f64::INFINITY,
        best_labels: None,
    };
    search.descend(0, 0, 0.0);
    let labels = search.best_labels.expect("some partition into k blocks exists");
    KMeansResult::from_assignment(w, ClusterAssignment::new(labels, k)?, 0, Vec::new())
}

struct ExactSearch<'a> {
    w: &'a WeightMatrix,
    k: usize,
    p: usize,
    labels: Vec<usize>,
    sums: Vec<f64>,
    sizes: Vec<usize>,
    best_cost: f64,
    best_labels: Option<Vec<usize>>,
}

impl ExactSearch<'_> {
    fn threshold(&self) -> f64 {
        if self.best_cost.is_finite() {
            self.best_cost - MOVE_TOL * self.best_cost.max(1.0)
        } else {
            f64::INFINITY
        }
    }

    fn descend(&mut self, i: usize, used: usize, cost: f64) {
        let m = self.labels.len();
        if used + (m - i) < self.k || cost >= self.threshold() {
            return;
        }
        if i == m {
            self.best_cost = cost;
            self.best_labels = Some(self.labels.clone());
            return;
        }
        let p = self.p;
        let row = self.w.row(i);
        for c in 0..used {
            let n = self.sizes[c] as f64;
            let block = &self.sums[c * p..(c + 1) * p];
            let dist: f64 = row
                .iter()
                .zip(block)
                .map(|(x, s)| {
                    let d = x - s / n;
                    d * d
                })
                .sum();
            // adding a point to a cluster of n raises its SSE by n/(n+1)·‖w−μ‖²
            let inc = n / (n + 1.0) * dist;
            self.push(i, c);
            self.descend(i + 1, used, cost + inc);
            self.pop(i, c);
        }
        if used < self.k {
            self.push(i, used);
            self.descend(i + 1, used + 1, cost);
            self.pop(i, used);
        }
    }

    fn push(&mut self, i: usize, c: usize) {
        let p = self.p;
        self.labels[i] = c;
        self.sizes[c] += 1;
        for (s, &v) in self.sums[c * p..(c + 1) * p].iter_mut().zip(self.w.row(i)) {
            *s += v;
        }
    }

    fn pop(&mut self, i: usize, c: usize) {
        let p = self.p;
        self.sizes[c] -= 1;
        for (s, &v) in self.sums[c * p..(c + 1) * p].iter_mut().zip(self.w.row(i)) {
            *s -= v;
        }
        if self.sizes[c] == 0 {
            // exact zero keeps reopened clusters free of cancellation residue
            self.sums[c * p..(c + 1) * p].iter_mut().for_each(|s| *s = 0.0);
        }
    }
}
