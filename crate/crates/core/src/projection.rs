//! Pruning and folding as orthogonal projections `C = U (UᵀU)⁻¹ Uᵀ`.
//!
//! A pruning basis selects coordinates, so `UᵀU` is the identity on the
//! retained rows. A folding basis has one nonzero per row, so `UᵀU` is
//! diagonal with the cluster sizes. Both inverses are therefore closed form
//! and no general matrix inversion is ever performed.
//!
//! Materialized [`ProjectionMatrix`] values exist for verification on small
//! `m`. Production paths use [`fold_rows`] and [`mask_rows`], which cost
//! `O(mp)`.

use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;

/// Retained row indices of a structured pruning (basis `U_p`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneSelection {
    retained: Vec<usize>,
    m: usize,
}

impl PruneSelection {
    /// `retained` must be strictly increasing and below `m`.
    pub fn new(retained: Vec<usize>, m: usize) -> Result<Self> {
        if let Some(&last) = retained.last() {
            if last >= m {
                return Err(Error::InvalidSelection(format!(
                    "index {last} out of range for {m} rows"
                )));
            }
        }
        if retained.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSelection(
                "retained indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { retained, m })
    }

    pub fn all(m: usize) -> Self {
        Self {
            retained: (0..m).collect(),
            m,
        }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Complement of the retained set, ascending.
    pub fn pruned(&self) -> Vec<usize> {
        let mut keep = self.retained.iter().peekable();
        (0..self.m)
            .filter(|i| {
                if keep.peek() == Some(&i) {
                    keep.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Rank `k_p` of the projection.
    pub fn rank(&self) -> usize {
        self.retained.len()
    }
}

/// Cluster label per row (basis `U_f`); every cluster is nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    k: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let m = labels.len();
        if k == 0 || k > m {
            return Err(Error::InvalidK { k, m });
        }
        let mut seen = vec![false; k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidAssignment(format!(
                    "row {i} has label {l} >= k={k}"
                )));
            }
            seen[l] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidAssignment(format!("cluster {empty} is empty")));
        }
        Ok(Self { labels, k })
    }

    /// Each row in its own cluster, labelled by row index.
    pub fn singletons(m: usize) -> Self {
        Self {
            labels: (0..m).collect(),
            k: m,
        }
    }

    /// Relabels clusters in order of first appearance.
    ///
    /// The result is the restricted-growth form: label 0 at row 0, and each
    /// new label one above the largest seen so far. Clusters are unchanged.
    pub fn canonical(&self) -> Self {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if map[l] == usize::MAX {
                    map[l] = next;
                    next += 1;
                }
                map[l]
            })
            .collect();
        Self { labels, k: self.k }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    /// Number of clusters `k_f`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Member rows of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// A materialized `m x m` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    c: WeightMatrix,
}

impl ProjectionMatrix {
    pub fn matrix(&self) -> &WeightMatrix {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    /// `‖C − Cᵀ‖_F`.
    pub fn symmetry_residual(&self) -> f64 {
        let t = self.c.transpose();
        crate::analysis::recon_error_sq(&self.c, &t)
            .expect("square")
            .sqrt()
    }

    /// `‖C² − C‖_F`.
    pub fn idempotence_residual(&self) -> f64 {
        let sq = self.c.matmul(&self.c).expect("square");
        crate::analysis::recon_error_sq(&sq, &self.c)
            .expect("square")
            .sqrt()
    }

    /// Tolerance used for the projection axioms: `1e-10 · max(1, ‖C‖_F)`.
    pub fn axiom_tolerance(&self) -> f64 {
        1e-10 * self.c.frob_norm().max(1.0)
    }

    pub fn is_orthogonal_projection(&self) -> bool {
        let tol = self.axiom_tolerance();
        self.symmetry_residual() <= tol && self.idempotence_residual() <= tol
    }
}

/// Diagonal projection with ones at the retained indices.
pub fn prune_projection(sel: &PruneSelection) -> ProjectionMatrix {
    let mut c = WeightMatrix::zeros(sel.m, sel.m);
    for &i in &sel.retained {
        c.set(i, i, 1.0);
    }
    ProjectionMatrix { c }
}

/// `C[i][j] = 1/|S|` when rows `i` and `j` share cluster `S`, else 0.
pub fn fold_projection(a: &ClusterAssignment) -> ProjectionMatrix {
    let m = a.m();
    let inv_sizes: Vec<f64> = a.sizes().into_iter().map(|s| 1.0 / s as f64).collect();
    let mut c = WeightMatrix::zeros(m, m);
    for members in a.members() {
        let v = inv_sizes[a.labels[members[0]]];
        for &i in &members {
            for &j in &members {
                c.set(i, j, v);
            }
        }
    }
    ProjectionMatrix { c }
}

/// `C · W`.
pub fn apply_projection(c: &ProjectionMatrix, w: &WeightMatrix) -> Result<WeightMatrix> {
    if c.dim() != w.rows() {
        return Err(Error::Shape(format!(
            "projection is {0}x{0} but matrix has {1} rows",
            c.dim(),
            w.rows()
        )));
    }
    c.c.matmul(w)
}

/// Per-cluster mean rows, indexed by cluster id.
pub fn cluster_means(a: &ClusterAssignment, w: &WeightMatrix) -> Result<WeightMatrix> {
    if a.m() != w.rows() {
        return Err(Error::Shape(format!(
            "assignment covers {} rows but matrix has {}",
            a.m(),
            w.rows()
        )));
    }
    let p = w.cols();
    let mut means = WeightMatrix::zeros(a.k(), p);
    for (j, members) in a.members().iter().enumerate() {
        let out = means.row_mut(j);
        // seed from the first member so a singleton mean is bitwise its row
        out.copy_from_slice(w.row(members[0]));
        for &i in &members[1..] {
            for (o, &v) in out.iter_mut().zip(w.row(i)) {
                *o += v;
            }
        }
        if members.len() > 1 {
            let n = members.len() as f64;
            for o in out.iter_mut() {
                *o /= n;
            }
        }
    }
    Ok(means)
}

/// `C_f W` without materializing `C_f`: every row replaced by its cluster mean.
pub fn fold_rows(a: &ClusterAssignment, w: &WeightMatrix) -> Result<WeightMatrix> {
    let means = cluster_means(a, w)?;
    let mut out = WeightMatrix::zeros(w.rows(), w.cols());
    for (i, &l) in a.labels().iter().enumerate() {
        out.row_mut(i).copy_from_slice(means.row(l));
    }
    Ok(out)
}

/// `C_p W` without materializing `C_p`: pruned rows zeroed, retained rows copied.
pub fn mask_rows(sel: &PruneSelection, w: &WeightMatrix) -> Result<WeightMatrix> {
    if sel.m() != w.rows() {
        return Err(Error::Shape(format!(
            "selection covers {} rows but matrix has {}",
            sel.m(),
            w.rows()
        )));
    }
    let mut out = WeightMatrix::zeros(w.rows(), w.cols());
    for &i in sel.retained() {
        out.row_mut(i).copy_from_slice(w.row(i));
    }
    Ok(out)
}
