//! Nearest-neighbor domain-gap scoring.
//!
//! For a source row `x` (gap features `s ⊕ a ⊕ s'`, z-normalized with
//! statistics fitted on source ∪ target):
//!
//! ```text
//! rho(x)     = ln ν_tar,k(x) − ln ν_src,k(x)          (own row excluded on the source side)
//! rho_hat(x) = max(rho(x) − min over real source rows of rho, 0)
//! w(x)       = 1 / (1 + rho_hat(x))                    ∈ (0, 1]
//! ```
//!
//! Small `rho` (large `w`) means the row looks like target data. Averaging
//! `rho` over the source set, scaled by the dimension and corrected by
//! `ln(M / (N − 1))`, gives the k-NN estimate of `KL(P_src ‖ P_tar)`.

mod classifier;
mod index;

use alloc::{format, vec::Vec};

pub use classifier::{classifier_score, ClassifierConfig, ClassifierScores, PENALTY_CLIP};
pub use index::{sq_dist, NnIndex};

use crate::dataset::{NormStats, TransitionDataset};
use crate::error::{Error, Result};
use crate::stats::SharedHistogram;

/// Default neighbor rank.
pub const DEFAULT_K: usize = 5;
/// Distances are floored here before taking logarithms.
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[inline]
fn floored_ln(d: f64, floored: &mut usize) -> f64 {
    if d < DISTANCE_FLOOR {
        *floored += 1;
        libm::log(DISTANCE_FLOOR)
    } else {
        libm::log(d)
    }
}

/// Per-row gap scores aligned with a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub k: usize,
    pub rho: Vec<f64>,
    pub rho_hat: Vec<f64>,
    pub weight: Vec<f64>,
    /// Minimum `rho` over the real source rows; the shift reference.
    pub rho_min: f64,
    /// Number of distances replaced by [`DISTANCE_FLOOR`].
    pub floored: usize,
    /// Fingerprint of the dataset the rows belong to.
    pub fingerprint: u64,
}

impl ScoreTable {
    /// Builds a table from raw scores, shifting by `rho_min`.
    pub fn from_rho(k: usize, rho: Vec<f64>, rho_min: f64, floored: usize, fingerprint: u64) -> Result<Self> {
        if let Some(index) = rho.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "rho", index });
        }
        let rho_hat: Vec<f64> = rho.iter().map(|r| (r - rho_min).max(0.0)).collect();
        let weight = rho_hat.iter().map(|h| 1.0 / (1.0 + h)).collect();
        Ok(ScoreTable { k, rho, rho_hat, weight, rho_min, floored, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Fails unless the table was computed for exactly `ds`.
    pub fn ensure_matches(&self, ds: &TransitionDataset) -> Result<()> {
        let got = ds.fingerprint();
        if self.len() != ds.len() || self.fingerprint != got {
            return Err(Error::StaleScores { expected: self.fingerprint, got });
        }
        Ok(())
    }

    /// Appends scores of generated rows (shifted by this table's `rho_min`)
    /// and re-keys the table to the augmented dataset.
    pub fn extended(&self, extra_rho: &[f64], extra_floored: usize, augmented: &TransitionDataset) -> Result<Self> {
        if augmented.len() != self.len() + extra_rho.len() {
            return Err(Error::shape(format!("{} rows", self.len() + extra_rho.len()), format!("{} rows", augmented.len())));
        }
        let mut rho = self.rho.clone();
        rho.extend_from_slice(extra_rho);
        Self::from_rho(self.k, rho, self.rho_min, self.floored + extra_floored, augmented.fingerprint())
    }
}

/// Neighbor indexes over a source/target pair, reusable for scoring real and
/// generated rows on the same scale.
#[derive(Debug, Clone)]
pub struct GapScorer {
    k: usize,
    norm: NormStats,
    src_index: NnIndex,
    tar_index: NnIndex,
    src_len: usize,
    tar_len: usize,
}

impl GapScorer {
    pub fn new(src: &TransitionDataset, tar: &TransitionDataset, k: usize) -> Result<Self> {
        src.ensure_nonempty("source dataset")?;
        tar.ensure_nonempty("target dataset")?;
        src.ensure_same_layout(tar)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if tar.len() < k {
            return Err(Error::NotEnoughNeighbors { k, available: tar.len() });
        }
        if src.len() < k + 1 {
            return Err(Error::NotEnoughNeighbors { k, available: src.len().saturating_sub(1) });
        }
        let norm = NormStats::compute_union(&[src, tar])?;
        let src_index = NnIndex::build(src, &norm)?;
        let tar_index = NnIndex::build(tar, &norm)?;
        Ok(GapScorer { k, norm, src_index, tar_index, src_len: src.len(), tar_len: tar.len() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn target_index(&self) -> &NnIndex {
        &self.tar_index
    }

    pub fn source_index(&self) -> &NnIndex {
        &self.src_index
    }

    /// k-th neighbor distances of every source row: `(to target, to source
    /// with self excluded)`, in source row order.
    pub fn member_distances(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (stored, _) = self.src_index.stored_points();
        let to_tar = self.tar_index.knn_distances(stored, self.k, false)?;
        let to_src = self.src_index.knn_distances(stored, self.k, true)?;
        Ok((self.src_index.unpermute(&to_tar), self.src_index.unpermute(&to_src)))
    }

    /// Raw `rho` of every source row and the number of floored distances.
    pub fn member_rho(&self) -> Result<(Vec<f64>, usize)> {
        let (to_tar, to_src) = self.member_distances()?;
        let mut floored = 0;
        let rho = to_tar.iter().zip(&to_src).map(|(&t, &s)| floored_ln(t, &mut floored) - floored_ln(s, &mut floored)).collect();
        Ok((rho, floored))
    }

    /// Score table for the source rows this scorer was built from.
    pub fn score_members(&self, src: &TransitionDataset) -> Result<ScoreTable> {
        if src.len() != self.src_len {
            return Err(Error::shape(format!("{} source rows", self.src_len), format!("{}", src.len())));
        }
        let (rho, floored) = self.member_rho()?;
        let rho_min = rho.iter().copied().fold(f64::INFINITY, f64::min);
        ScoreTable::from_rho(self.k, rho, rho_min, floored, src.fingerprint())
    }

    /// Raw `rho` of rows that are not part of the source index (e.g.
    /// generated rows): the source-side distance is taken against the real
    /// source rows with no self exclusion.
    pub fn external_rho(&self, rows: &TransitionDataset) -> Result<(Vec<f64>, usize)> {
        if rows.feature_dim() != self.norm.dim() {
            return Err(Error::shape(format!("{} gap features", self.norm.dim()), format!("{}", rows.feature_dim())));
        }
        let pts = self.norm.normalize_dataset(rows)?;
        let to_tar = self.tar_index.knn_distances(&pts, self.k, false)?;
        let to_src = self.src_index.knn_distances(&pts, self.k, false)?;
        let mut floored = 0;
        let rho = to_tar.iter().zip(&to_src).map(|(&t, &s)| floored_ln(t, &mut floored) - floored_ln(s, &mut floored)).collect();
        Ok((rho, floored))
    }

    /// k-NN estimate of `KL(P_src ‖ P_tar)` including the `ln(M/(N−1))` term.
    pub fn kl_estimate(&self) -> Result<f64> {
        let (rho, _) = self.member_rho()?;
        let d = self.norm.dim() as f64;
        let n = self.src_len as f64;
        let m = self.tar_len as f64;
        Ok(d / n * rho.iter().sum::<f64>() + libm::log(m / (n - 1.0)))
    }
}

/// Scores every source row against the target set.
pub fn score_source(src: &TransitionDataset, tar: &TransitionDataset, k: usize) -> Result<ScoreTable> {
    GapScorer::new(src, tar, k)?.score_members(src)
}

/// k-NN estimate of `KL(P_src ‖ P_tar)` over gap features.
pub fn kl_estimate(src: &TransitionDataset, tar: &TransitionDataset, k: usize) -> Result<f64> {
    GapScorer::new(src, tar, k)?.kl_estimate()
}

/// Weight threshold such that `ceil(N · (1 − ξ/100))` rows have
/// `w ≥ threshold`; tied rows are all kept.
pub fn quantile_threshold(table: &ScoreTable, xi_percent: f64) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Empty("score table"));
    }
    if !(0.0..100.0).contains(&xi_percent) {
        return Err(Error::invalid(format!("selection ratio {xi_percent} outside [0, 100)")));
    }
    let n = table.len();
    let keep = libm::ceil(n as f64 * (100.0 - xi_percent) / 100.0 - 1e-9).clamp(1.0, n as f64) as usize;
    let mut desc = table.weight.clone();
    desc.sort_by(|a, b| b.total_cmp(a));
    Ok(desc[keep - 1])
}

/// Source-row weights `ω = w · 1(w ≥ w_ξ)`.
pub fn selection_weights(table: &ScoreTable, xi_percent: f64) -> Result<Vec<f64>> {
    let threshold = quantile_threshold(table, xi_percent)?;
    Ok(table.weight.iter().map(|&w| if w >= threshold { w } else { 0.0 }).collect())
}

/// Log-distance histograms of source→target and target→target (self
/// excluded) nearest-neighbor distances on shared bins.
#[derive(Debug, Clone, PartialEq)]
pub struct NnHistograms {
    /// Bin edges on the natural-log distance axis.
    pub edges: Vec<f64>,
    pub src_counts: Vec<usize>,
    pub tar_counts: Vec<usize>,
    /// Raw 1-NN distances (floored), source rows then target rows.
    pub src_log_dist: Vec<f64>,
    pub tar_log_dist: Vec<f64>,
    /// Source and target were identical, so each source row skipped its own
    /// zero-distance match as well.
    pub self_matched: bool,
}

pub fn nn_distance_histogram(src: &TransitionDataset, tar: &TransitionDataset, bins: usize) -> Result<NnHistograms> {
    src.ensure_nonempty("source dataset")?;
    tar.ensure_nonempty("target dataset")?;
    src.ensure_same_layout(tar)?;
    let norm = NormStats::compute_union(&[src, tar])?;
    let tar_index = NnIndex::build(tar, &norm)?;
    let src_pts = norm.normalize_dataset(src)?;
    let mut floored = 0;
    let self_matched = src.records() == tar.records();
    let src_nn = if self_matched { tar_index.self_knn_distances(1, true)? } else { tar_index.knn_distances(&src_pts, 1, false)? };
    let src_log_dist: Vec<f64> = src_nn.into_iter().map(|d| floored_ln(d, &mut floored)).collect();
    let tar_log_dist: Vec<f64> = tar_index.self_knn_distances(1, true)?.into_iter().map(|d| floored_ln(d, &mut floored)).collect();
    let h = SharedHistogram::new(&[&src_log_dist, &tar_log_dist], bins)?;
    let mut counts = h.counts.into_iter();
    Ok(NnHistograms {
        edges: h.edges,
        src_counts: counts.next().unwrap(),
        tar_counts: counts.next().unwrap(),
        src_log_dist,
        tar_log_dist,
        self_matched,
    })
}
