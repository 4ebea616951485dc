//! Reconstruction errors, rank-slack quantities and theorem checks.
//!
//! Errors are kept squared (`‖W − Ŵ‖²_F`) throughout; square roots appear
//! only in the normalized differences
//!
//! ```text
//! delta_rank(k)   = (‖W − W_p(k)‖ − ‖W − W_p(k+1)‖) / ‖W‖
//! delta_method(k) = (‖W − W_p(k)‖ − ‖W − W_f*(k)‖)  / ‖W‖
//! ```
//!
//! For every pruning rank `k_p < m` the checked chain is
//! `‖W − W_p(k_p)‖² ≥ ‖W − W'_f(k_p+1)‖² ≥ ‖W − W*_f(k_p+1)‖²`, where `W'_f`
//! merges the pruned rows into one cluster and `W*_f` is the k-means fold.
//! Without the exact oracle, `W*_f` is the better of a seeded Hartigan run
//! and a Hartigan run warm-started from `W'_f`; since Hartigan never raises
//! the WCSS, the second inequality still holds.

use std::io;
use std::path::Path;

use rayon::prelude::*;

use crate::clustering::{hartigan_refine, kmeans_exact, kmeans_hartigan_restarts, KMeansResult};
use crate::compress::{magnitude_select, singleton_fold, FoldOptions, MagnitudeCriterion};
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::projection::{fold_rows, mask_rows, ClusterAssignment, PruneSelection};
use crate::sum::CompensatedSum;

/// Relative tolerance of the theorem chain.
pub const CHAIN_RTOL: f64 = 1e-9;

/// `Σ (w − ŵ)²` with compensated row-major accumulation.
pub fn recon_error_sq(w: &WeightMatrix, w_hat: &WeightMatrix) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        )));
    }
    Ok(w.data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .collect::<CompensatedSum>()
        .value())
}

pub fn prune_error_sq(w: &WeightMatrix, sel: &PruneSelection) -> Result<f64> {
    recon_error_sq(w, &mask_rows(sel, w)?)
}

pub fn fold_error_sq(w: &WeightMatrix, a: &ClusterAssignment) -> Result<f64> {
    recon_error_sq(w, &fold_rows(a, w)?)
}

fn normalized(diff: f64, frob: f64) -> f64 {
    if frob > 0.0 {
        diff / frob
    } else {
        0.0
    }
}

/// Gain from raising the magnitude-pruning rank from `k` to `k + 1`.
pub fn delta_rank(w: &WeightMatrix, crit: MagnitudeCriterion, k: usize) -> Result<f64> {
    let m = w.rows();
    if k + 1 > m {
        return Err(Error::InvalidBudget { k, m });
    }
    let at_k = prune_error_sq(w, &magnitude_select(w, k, crit)?)?;
    let at_k1 = prune_error_sq(w, &magnitude_select(w, k + 1, crit)?)?;
    Ok(normalized(at_k.sqrt() - at_k1.sqrt(), w.frob_norm()))
}

/// Best fold with `k_f` clusters available under `opts`.
///
/// Exact mode enumerates partitions. Otherwise the result is the lower-WCSS
/// of the seeded Hartigan run(s) and Hartigan warm-started from the singleton
/// fold of the `k_f − 1` magnitude pruning (ties favour the warm start).
pub fn best_fold(
    w: &WeightMatrix,
    crit: MagnitudeCriterion,
    k_f: usize,
    opts: &FoldOptions,
) -> Result<KMeansResult> {
    if opts.exact {
        return kmeans_exact(w, k_f);
    }
    let m = w.rows();
    if k_f == 0 || k_f > m {
        return Err(Error::InvalidK { k: k_f, m });
    }
    let warm = warm_started_fold(w, crit, k_f, opts.max_sweeps)?;
    let seeded = kmeans_hartigan_restarts(w, k_f, opts.seed, opts.max_sweeps, opts.restarts)?;
    Ok(if seeded.wcss < warm.wcss { seeded } else { warm })
}

/// Hartigan refinement started from the singleton fold of the `k_f − 1`
/// magnitude pruning; its WCSS never exceeds that singleton fold's.
pub fn warm_started_fold(
    w: &WeightMatrix,
    crit: MagnitudeCriterion,
    k_f: usize,
    max_sweeps: usize,
) -> Result<KMeansResult> {
    let m = w.rows();
    if k_f == 0 || k_f > m {
        return Err(Error::InvalidK { k: k_f, m });
    }
    let start = if k_f == m {
        ClusterAssignment::singletons(m)
    } else {
        singleton_fold(&magnitude_select(w, k_f - 1, crit)?)?
    };
    hartigan_refine(w, start, max_sweeps)
}

/// Gain from replacing magnitude pruning by k-means folding at the same rank.
///
/// Reported, never sign-checked: at matched rank folding is not guaranteed
/// to win.
pub fn delta_method(w: &WeightMatrix, crit: MagnitudeCriterion, k: usize, opts: &FoldOptions) -> Result<f64> {
    let m = w.rows();
    if k == 0 || k > m {
        return Err(Error::InvalidBudget { k, m });
    }
    let prune = prune_error_sq(w, &magnitude_select(w, k, crit)?)?;
    let fold = fold_error_sq(w, &best_fold(w, crit, k, opts)?.assignment)?;
    Ok(normalized(prune.sqrt() - fold.sqrt(), w.frob_norm()))
}

/// Both theorem inequalities at one pruning rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremVerdict {
    pub k_p: usize,
    pub err_prune_sq: f64,
    /// Singleton fold at `k_p + 1` clusters.
    pub err_singleton_sq: f64,
    /// Optimal (or warm-started) fold at `k_p + 1` clusters.
    pub err_optfold_sq: f64,
    pub prune_ge_singleton: bool,
    pub singleton_ge_optfold: bool,
}

impl TheoremVerdict {
    pub fn holds(&self) -> bool {
        self.prune_ge_singleton && self.singleton_ge_optfold
    }

    fn evaluate(k_p: usize, prune: f64, singleton: f64, optfold: f64) -> Self {
        Self {
            k_p,
            err_prune_sq: prune,
            err_singleton_sq: singleton,
            err_optfold_sq: optfold,
            prune_ge_singleton: prune + CHAIN_RTOL * prune.max(1.0) >= singleton,
            singleton_ge_optfold: singleton + CHAIN_RTOL * singleton.max(1.0) >= optfold,
        }
    }

    /// `Err(TheoremViolation)` naming the first failed inequality.
    pub fn check(&self, layer: &str) -> Result<()> {
        if !self.prune_ge_singleton {
            return Err(Error::TheoremViolation {
                layer: layer.to_string(),
                k: self.k_p,
                relation: "prune >= singleton fold".into(),
                lhs: self.err_prune_sq,
                rhs: self.err_singleton_sq,
            });
        }
        if !self.singleton_ge_optfold {
            return Err(Error::TheoremViolation {
                layer: layer.to_string(),
                k: self.k_p,
                relation: "singleton fold >= optimal fold".into(),
                lhs: self.err_singleton_sq,
                rhs: self.err_optfold_sq,
            });
        }
        Ok(())
    }
}

/// Errors of pruning at `k_p` and of both folds at `k_p + 1`.
fn chain_errors(
    w: &WeightMatrix,
    crit: MagnitudeCriterion,
    k_p: usize,
    opts: &FoldOptions,
) -> Result<(f64, f64, f64)> {
    let sel = magnitude_select(w, k_p, crit)?;
    let prune = prune_error_sq(w, &sel)?;
    let singleton = fold_error_sq(w, &singleton_fold(&sel)?)?;
    let opt = fold_error_sq(w, &best_fold(w, crit, k_p + 1, opts)?.assignment)?;
    Ok((prune, singleton, opt))
}

/// Theorem verdicts for every pruning rank `0..m`.
pub fn verify_theorems(
    w: &WeightMatrix,
    crit: MagnitudeCriterion,
    opts: &FoldOptions,
) -> Result<Vec<TheoremVerdict>> {
    let ranks: Vec<usize> = (0..w.rows()).collect();
    verify_theorems_at(w, crit, opts, &ranks)
}

/// Theorem verdicts for the listed pruning ranks (each must be `< m`).
pub fn verify_theorems_at(
    w: &WeightMatrix,
    crit: MagnitudeCriterion,
    opts: &FoldOptions,
    ranks: &[usize],
) -> Result<Vec<TheoremVerdict>> {
    let m = w.rows();
    if let Some(&bad) = ranks.iter().find(|&&k| k >= m) {
        return Err(Error::InvalidBudget { k: bad, m });
    }
    ranks
        .par_iter()
        .map(|&k_p| {
            let (p, s, o) = chain_errors(w, crit, k_p, opts)?;
            Ok(TheoremVerdict::evaluate(k_p, p, s, o))
        })
        .collect()
}

/// First violated verdict as an error, if any.
pub fn check_verdicts(layer: &str, verdicts: &[TheoremVerdict]) -> Result<()> {
    verdicts.iter().try_for_each(|v| v.check(layer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRecord {
    pub k: usize,
    /// Pruning at rank `k`.
    pub err_prune_sq: f64,
    /// Singleton fold of that pruning (`k + 1` clusters).
    pub err_singleton_sq: f64,
    /// Optimal fold at `k + 1` clusters.
    pub err_optfold_sq: f64,
    pub rel_prune: f64,
    pub rel_singleton: f64,
    pub rel_optfold: f64,
    pub delta_rank: f64,
    /// Pruning vs optimal fold, both at rank `k`; 0 at `k = 0` where both
    /// projections are the zero map.
    pub delta_method: f64,
    pub chain_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSweepReport {
    pub layer: String,
    pub criterion: MagnitudeCriterion,
    pub frob_norm_sq: f64,
    pub records: Vec<RankRecord>,
}

pub const CSV_HEADER: [&str; 12] = [
    "layer",
    "k",
    "crit",
    "err_prune_sq",
    "err_singleton_sq",
    "err_optfold_sq",
    "rel_prune",
    "rel_singleton",
    "rel_optfold",
    "delta_rank",
    "delta_method",
    "chain_ok",
];

/// Per-rank errors, relative errors, Δ quantities and chain verdicts for
/// every `k` in `0..m`.
pub fn sweep_report(
    layer: &str,
    w: &WeightMatrix,
    crit: MagnitudeCriterion,
    opts: &FoldOptions,
) -> Result<RankSweepReport> {
    let m = w.rows();
    let frob_sq = w.frob_norm_sq();
    let frob = frob_sq.sqrt();
    let rel = |e: f64| if frob_sq > 0.0 { e / frob_sq } else { 0.0 };

    // prune errors at 0..=m and fold errors at 1..=m, each rank independent
    let prune: Vec<f64> = (0..=m)
        .into_par_iter()
        .map(|k| prune_error_sq(w, &magnitude_select(w, k, crit)?))
        .collect::<Result<_>>()?;
    let per_rank: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let singleton = fold_error_sq(w, &singleton_fold(&magnitude_select(w, k, crit)?)?)?;
            let opt = fold_error_sq(w, &best_fold(w, crit, k + 1, opts)?.assignment)?;
            Ok((singleton, opt))
        })
        .collect::<Result<_>>()?;

    let records = (0..m)
        .map(|k| {
            let (singleton, optfold) = per_rank[k];
            let fold_at_k = if k == 0 { frob_sq } else { per_rank[k - 1].1 };
            let verdict = TheoremVerdict::evaluate(k, prune[k], singleton, optfold);
            RankRecord {
                k,
                err_prune_sq: prune[k],
                err_singleton_sq: singleton,
                err_optfold_sq: optfold,
                rel_prune: rel(prune[k]),
                rel_singleton: rel(singleton),
                rel_optfold: rel(optfold),
                delta_rank: normalized(prune[k].sqrt() - prune[k + 1].sqrt(), frob),
                delta_method: if k == 0 {
                    0.0
                } else {
                    normalized(prune[k].sqrt() - fold_at_k.sqrt(), frob)
                },
                chain_ok: verdict.holds(),
            }
        })
        .collect();

    Ok(RankSweepReport {
        layer: layer.to_string(),
        criterion: crit,
        frob_norm_sq: frob_sq,
        records,
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl RankSweepReport {
    pub fn chain_holds(&self) -> bool {
        self.records.iter().all(|r| r.chain_ok)
    }

    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.records {
            wtr.write_record([
                self.layer.clone(),
                r.k.to_string(),
                self.criterion.as_str().to_string(),
                fmt_float(r.err_prune_sq),
                fmt_float(r.err_singleton_sq),
                fmt_float(r.err_optfold_sq),
                fmt_float(r.rel_prune),
                fmt_float(r.rel_singleton),
                fmt_float(r.rel_optfold),
                fmt_float(r.delta_rank),
                fmt_float(r.delta_method),
                r.chain_ok.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::matrixio::write_atomic(path, self.to_csv().as_bytes())
    }

    /// Parses one layer's CSV back into a report.
    ///
    /// `frob_norm_sq` is recovered from the `k = 0` row, where pruning
    /// removes every row; it is 0 when that row is absent.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Report(msg);
        let mut rdr = csv::Reader::from_reader(io::Cursor::new(text));
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut layer = None;
        let mut criterion = None;
        let mut records = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let float = |i: usize| {
                field(i)
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {}: column {}: {e}", line + 1, CSV_HEADER[i])))
            };
            let name = field(0).to_string();
            let crit: MagnitudeCriterion = field(2).parse().map_err(bad)?;
            if layer.get_or_insert_with(|| name.clone()) != &name {
                return Err(bad(format!("row {} belongs to another layer", line + 1)));
            }
            if *criterion.get_or_insert(crit) != crit {
                return Err(bad(format!("row {} uses another criterion", line + 1)));
            }
            records.push(RankRecord {
                k: field(1)
                    .parse()
                    .map_err(|e| bad(format!("row {}: k: {e}", line + 1)))?,
                err_prune_sq: float(3)?,
                err_singleton_sq: float(4)?,
                err_optfold_sq: float(5)?,
                rel_prune: float(6)?,
                rel_singleton: float(7)?,
                rel_optfold: float(8)?,
                delta_rank: float(9)?,
                delta_method: float(10)?,
                chain_ok: field(11)
                    .parse()
                    .map_err(|e| bad(format!("row {}: chain_ok: {e}", line + 1)))?,
            });
        }
        let frob_norm_sq = records.iter().find(|r| r.k == 0).map_or(0.0, |r| r.err_prune_sq);
        Ok(Self {
            layer: layer.unwrap_or_default(),
            criterion: criterion.unwrap_or(MagnitudeCriterion::L2),
            frob_norm_sq,
            records,
        })
    }
}
