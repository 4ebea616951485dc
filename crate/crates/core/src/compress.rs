//! Layer compression: magnitude pruning, singleton folding, k-means folding,
//! and the successor-layer surgery that makes the compressed layer smaller.
//!
//! Pruned layers are physically shrunk: retained rows stay, and the
//! successor keeps only the matching columns. Folded layers keep one row per
//! cluster (its mean) and the successor's columns are summed within each
//! cluster, which is exactly equivalent to the full-size folded network.
//!
//! Biases are not part of a layer. A producer that wants them folded can
//! append the bias as an extra column of the weight matrix before export.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::recon_error_sq;
use crate::clustering::{self, kmeans_exact, kmeans_hartigan_restarts, KMeansResult};
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::matrixio::Checkpoint;
use crate::projection::{cluster_means, fold_rows, mask_rows, ClusterAssignment, PruneSelection};
use crate::sum::CompensatedSum;

/// Row-norm used to rank output units for pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagnitudeCriterion {
    L1,
    L2,
}

impl MagnitudeCriterion {
    pub fn row_norm(self, row: &[f64]) -> f64 {
        match self {
            Self::L1 => row.iter().map(|v| v.abs()).collect::<CompensatedSum>().value(),
            Self::L2 => row
                .iter()
                .map(|v| v * v)
                .collect::<CompensatedSum>()
                .value()
                .sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
        }
    }
}

impl fmt::Display for MagnitudeCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MagnitudeCriterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(format!("unknown criterion '{other}' (expected l1 or l2)")),
        }
    }
}

/// Rows ordered by descending norm; equal norms keep ascending index order.
pub fn magnitude_ranking(w: &WeightMatrix, crit: MagnitudeCriterion) -> Vec<usize> {
    let norms: Vec<f64> = w.iter_rows().map(|r| crit.row_norm(r)).collect();
    let mut order: Vec<usize> = (0..w.rows()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `k_p` rows of largest norm.
///
/// The ranking is a fixed total order, so budgets `k` and `k + 1` give
/// nested retained sets.
pub fn magnitude_select(w: &WeightMatrix, k_p: usize, crit: MagnitudeCriterion) -> Result<PruneSelection> {
    let m = w.rows();
    if k_p > m {
        return Err(Error::InvalidBudget { k: k_p, m });
    }
    let mut keep = magnitude_ranking(w, crit);
    keep.truncate(k_p);
    keep.sort_unstable();
    PruneSelection::new(keep, m)
}

/// Folding that merges every pruned row into one cluster and keeps each
/// retained row as a singleton; `k_f = k_p + 1`.
pub fn singleton_fold(sel: &PruneSelection) -> Result<ClusterAssignment> {
    let m = sel.m();
    if sel.rank() >= m {
        return Err(Error::NothingPruned { m });
    }
    let mut labels = vec![0; m];
    for (j, &i) in sel.retained().iter().enumerate() {
        labels[i] = j + 1;
    }
    Ok(ClusterAssignment::new(labels, sel.rank() + 1)?.canonical())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldOptions {
    pub seed: u64,
    pub exact: bool,
    pub max_sweeps: usize,
    pub restarts: usize,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            exact: false,
            max_sweeps: clustering::DEFAULT_MAX_SWEEPS,
            restarts: 1,
        }
    }
}

/// k-means folding with `k_f` clusters; exhaustive when `opts.exact`.
pub fn optimal_fold(w: &WeightMatrix, k_f: usize, opts: &FoldOptions) -> Result<KMeansResult> {
    if opts.exact {
        kmeans_exact(w, k_f)
    } else {
        kmeans_hartigan_restarts(w, k_f, opts.seed, opts.max_sweeps, opts.restarts)
    }
}

/// How a layer's rows were reduced.
#[derive(Debug, Clone, PartialEq)]
pub enum Mapping {
    Pruned(PruneSelection),
    Folded(ClusterAssignment),
}

impl Mapping {
    pub fn mode(&self) -> CompressionMode {
        match self {
            Self::Pruned(_) => CompressionMode::Pruned,
            Self::Folded(_) => CompressionMode::Folded,
        }
    }

    /// Rows left after compression.
    pub fn effective_rank(&self) -> usize {
        match self {
            Self::Pruned(s) => s.rank(),
            Self::Folded(a) => a.k(),
        }
    }

    /// Full-size projected matrix `C W`.
    pub fn project(&self, w: &WeightMatrix) -> Result<WeightMatrix> {
        match self {
            Self::Pruned(s) => mask_rows(s, w),
            Self::Folded(a) => fold_rows(a, w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionMode {
    Pruned,
    Folded,
}

/// A compressed layer and its adapted successor; `next.cols == layer.rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayerPair {
    pub layer: WeightMatrix,
    pub next: WeightMatrix,
    pub mapping: Mapping,
}

impl CompressedLayerPair {
    pub fn mode(&self) -> CompressionMode {
        self.mapping.mode()
    }
}

fn check_pair(w: &WeightMatrix, next: &WeightMatrix) -> Result<()> {
    if next.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "successor has {} columns but layer has {} rows",
            next.cols(),
            w.rows()
        )));
    }
    Ok(())
}

/// Replaces each cluster by its mean row and sums the successor's columns
/// within each cluster.
pub fn fold_merge_pair(
    w: &WeightMatrix,
    next: &WeightMatrix,
    a: &ClusterAssignment,
) -> Result<CompressedLayerPair> {
    check_pair(w, next)?;
    let layer = cluster_means(a, w)?;
    let members = a.members();
    let mut merged = WeightMatrix::zeros(next.rows(), a.k());
    for r in 0..next.rows() {
        let src = next.row(r);
        for (j, cluster) in members.iter().enumerate() {
            // first member seeds the sum so singleton columns copy bitwise
            let mut s = src[cluster[0]];
            for &i in &cluster[1..] {
                s += src[i];
            }
            merged.set(r, j, s);
        }
    }
    Ok(CompressedLayerPair {
        layer,
        next: merged,
        mapping: Mapping::Folded(a.clone()),
    })
}

/// Drops pruned rows of the layer and the matching successor columns.
pub fn prune_drop_pair(
    w: &WeightMatrix,
    next: &WeightMatrix,
    sel: &PruneSelection,
) -> Result<CompressedLayerPair> {
    check_pair(w, next)?;
    if sel.m() != w.rows() {
        return Err(Error::Shape(format!(
            "selection covers {} rows but layer has {}",
            sel.m(),
            w.rows()
        )));
    }
    Ok(CompressedLayerPair {
        layer: w.select_rows(sel.retained()),
        next: next.select_cols(sel.retained()),
        mapping: Mapping::Pruned(sel.clone()),
    })
}

/// Applies a mapping to a (layer, successor) pair.
pub fn compress_pair(
    w: &WeightMatrix,
    next: &WeightMatrix,
    mapping: &Mapping,
) -> Result<CompressedLayerPair> {
    match mapping {
        Mapping::Pruned(s) => prune_drop_pair(w, next, s),
        Mapping::Folded(a) => fold_merge_pair(w, next, a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mag1,
    Mag2,
    Fold,
    SingletonFold,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mag1 => "mag1",
            Self::Mag2 => "mag2",
            Self::Fold => "fold",
            Self::SingletonFold => "singleton-fold",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mag1" => Ok(Self::Mag1),
            "mag2" => Ok(Self::Mag2),
            "fold" => Ok(Self::Fold),
            "singleton-fold" => Ok(Self::SingletonFold),
            other => Err(format!(
                "unknown method '{other}' (expected mag1, mag2, fold or singleton-fold)"
            )),
        }
    }
}

/// Whether folds get the same rank as pruning or one extra cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    #[default]
    Matched,
    TheoremSlack,
}

impl RankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Matched => "matched",
            Self::TheoremSlack => "theorem-slack",
        }
    }
}

impl FromStr for RankMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "matched" => Ok(Self::Matched),
            "theorem-slack" => Ok(Self::TheoremSlack),
            other => Err(format!(
                "unknown rank mode '{other}' (expected matched or theorem-slack)"
            )),
        }
    }
}

/// Per-layer budget `max(1, round(ratio · m))`, capped at `m`.
pub fn budget(m: usize, ratio: f64) -> usize {
    ((ratio * m as f64).round() as usize).clamp(1, m.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressConfig {
    pub ratio: f64,
    pub method: Method,
    /// Ranking used by `singleton-fold`; `mag1`/`mag2` imply their own.
    pub criterion: MagnitudeCriterion,
    pub rank_mode: RankMode,
    pub fold: FoldOptions,
}

impl CompressConfig {
    pub fn new(ratio: f64, method: Method) -> Self {
        Self {
            ratio,
            method,
            criterion: MagnitudeCriterion::L2,
            rank_mode: RankMode::Matched,
            fold: FoldOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.fold.restarts == 0 || self.fold.max_sweeps == 0 {
            return Err(Error::InvalidValue(
                "restarts and max_sweeps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn effective_criterion(&self) -> MagnitudeCriterion {
        match self.method {
            Method::Mag1 => MagnitudeCriterion::L1,
            Method::Mag2 => MagnitudeCriterion::L2,
            _ => self.criterion,
        }
    }
}

/// Outcome of planning one layer at budget `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub mapping: Mapping,
    /// WCSS of the fold, when the method folds.
    pub wcss: Option<f64>,
}

/// Chooses the row reduction for `w` under `method` at budget `k`.
///
/// In matched mode folds use `k` clusters (singleton folds prune `k − 1`
/// rows first). In theorem-slack mode folds use `k + 1` clusters, capped at
/// `m`, and singleton folds prune to `k`.
pub fn plan_layer(
    w: &WeightMatrix,
    method: Method,
    k: usize,
    crit: MagnitudeCriterion,
    rank_mode: RankMode,
    opts: &FoldOptions,
) -> Result<LayerPlan> {
    let m = w.rows();
    if k > m {
        return Err(Error::InvalidBudget { k, m });
    }
    match method {
        Method::Mag1 | Method::Mag2 => {
            let crit = if method == Method::Mag1 {
                MagnitudeCriterion::L1
            } else {
                MagnitudeCriterion::L2
            };
            Ok(LayerPlan {
                mapping: Mapping::Pruned(magnitude_select(w, k, crit)?),
                wcss: None,
            })
        }
        Method::Fold => {
            let k_f = match rank_mode {
                RankMode::Matched => k,
                RankMode::TheoremSlack => (k + 1).min(m),
            };
            let r = optimal_fold(w, k_f, opts)?;
            Ok(LayerPlan {
                mapping: Mapping::Folded(r.assignment),
                wcss: Some(r.wcss),
            })
        }
        Method::SingletonFold => {
            let k_p = match rank_mode {
                RankMode::Matched => k.checked_sub(1).ok_or(Error::InvalidBudget { k, m })?,
                RankMode::TheoremSlack => k,
            };
            let a = if k_p >= m {
                ClusterAssignment::singletons(m)
            } else {
                singleton_fold(&magnitude_select(w, k_p, crit)?)?
            };
            let wcss = clustering::wcss(w, &a)?;
            Ok(LayerPlan {
                mapping: Mapping::Folded(a),
                wcss: Some(wcss),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub next: String,
    pub m: usize,
    pub k: usize,
    pub mode: CompressionMode,
    pub criterion: Option<MagnitudeCriterion>,
    pub error_sq: f64,
    pub wcss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionMetadata {
    pub method: Method,
    pub ratio: f64,
    pub rank_mode: RankMode,
    pub seed: u64,
    pub exact: bool,
    pub per_layer: Vec<LayerReport>,
}

impl CompressionMetadata {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metadata serializes");
        s.push('\n');
        s
    }
}

/// Compresses every layer that has a successor in the adjacency list.
///
/// Pairs are processed in adjacency order, each on the current (already
/// adapted) weights, so chains stay dimensionally consistent. Layers that
/// are never a pair source keep their rows; their columns change only when
/// they follow a compressed layer.
pub fn compress_checkpoint(
    ckpt: &Checkpoint,
    cfg: &CompressConfig,
) -> Result<(Checkpoint, CompressionMetadata)> {
    cfg.validate()?;
    let pairs = ckpt.resolved_adjacency()?;
    let crit = cfg.effective_criterion();
    let mut out = ckpt.clone();
    let mut per_layer = Vec::with_capacity(pairs.len());

    for (ia, ib) in pairs {
        let w = &out.layers[ia].weights;
        let next = &out.layers[ib].weights;
        let m = w.rows();
        let k = budget(m, cfg.ratio);
        let plan = plan_layer(w, cfg.method, k, crit, cfg.rank_mode, &cfg.fold)?;
        let error_sq = recon_error_sq(w, &plan.mapping.project(w)?)?;
        let pair = compress_pair(w, next, &plan.mapping)?;

        per_layer.push(LayerReport {
            name: out.layers[ia].name.clone(),
            next: out.layers[ib].name.clone(),
            m,
            k: pair.layer.rows(),
            mode: plan.mapping.mode(),
            criterion: match cfg.method {
                Method::Fold => None,
                _ => Some(crit),
            },
            error_sq,
            wcss: plan.wcss,
        });
        out.layers[ia].weights = pair.layer;
        out.layers[ib].weights = pair.next;
    }

    out.resolved_adjacency()?;
    let meta = CompressionMetadata {
        method: cfg.method,
        ratio: cfg.ratio,
        rank_mode: cfg.rank_mode,
        seed: cfg.fold.seed,
        exact: cfg.fold.exact,
        per_layer,
    };
    Ok((out, meta))
}

pub const METADATA_FILE: &str = "metadata.json";

/// Writes the compressed checkpoint and `metadata.json` into `dir`.
pub fn write_compressed(ckpt: &Checkpoint, meta: &CompressionMetadata, dir: &std::path::Path) -> Result<()> {
    crate::matrixio::save_checkpoint(ckpt, dir)?;
    crate::matrixio::write_atomic(&dir.join(METADATA_FILE), meta.to_json().as_bytes())
}
