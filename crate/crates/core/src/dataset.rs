//! Transition datasets and normalization statistics.
//!
//! A row is packed as `s (state_dim) | a (action_dim) | r | s' (state_dim) |
//! terminal`, all `f32`. The *gap features* of a row are `s ⊕ a ⊕ s'`; they
//! are what neighbor distances are measured on and never include the reward.

use alloc::{format, vec::Vec};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Target,
    SourceReal,
    SourceGenerated,
}

impl Origin {
    pub fn is_source(self) -> bool {
        !matches!(self, Origin::Target)
    }
}

/// Read-only view of one packed row.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub state: &'a [f32],
    pub action: &'a [f32],
    pub reward: f32,
    pub next_state: &'a [f32],
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    data: Vec<f32>,
    origins: Vec<Origin>,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        TransitionDataset { state_dim, action_dim, data: Vec::new(), origins: Vec::new() }
    }

    pub fn with_capacity(state_dim: usize, action_dim: usize, rows: usize) -> Self {
        let mut ds = Self::new(state_dim, action_dim);
        ds.data.reserve(rows * ds.record_len());
        ds.origins.reserve(rows);
        ds
    }

    /// Builds a dataset from packed records, validating the layout and the
    /// terminal flags.
    pub fn from_records(state_dim: usize, action_dim: usize, data: Vec<f32>, origin: Origin) -> Result<Self> {
        let record_len = 2 * state_dim + action_dim + 2;
        if state_dim == 0 {
            return Err(Error::invalid("state_dim must be at least 1"));
        }
        if !data.len().is_multiple_of(record_len) {
            return Err(Error::shape(format!("a multiple of {record_len} values"), format!("{} values", data.len())));
        }
        let rows = data.len() / record_len;
        for r in 0..rows {
            let t = data[r * record_len + record_len - 1];
            if t != 0.0 && t != 1.0 {
                return Err(Error::invalid(format!("row {r}: terminal flag {t} is not 0 or 1")));
            }
        }
        Ok(TransitionDataset { state_dim, action_dim, data, origins: alloc::vec![origin; rows] })
    }

    pub fn push(&mut self, state: &[f32], action: &[f32], reward: f32, next_state: &[f32], terminal: bool, origin: Origin) -> Result<()> {
        if state.len() != self.state_dim || next_state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::shape(
                format!("state {} / action {}", self.state_dim, self.action_dim),
                format!("state {} / action {} / next {}", state.len(), action.len(), next_state.len()),
            ));
        }
        self.data.extend_from_slice(state);
        self.data.extend_from_slice(action);
        self.data.push(reward);
        self.data.extend_from_slice(next_state);
        self.data.push(if terminal { 1.0 } else { 0.0 });
        self.origins.push(origin);
        Ok(())
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    #[inline]
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Floats per packed row.
    #[inline]
    pub fn record_len(&self) -> usize {
        2 * self.state_dim + self.action_dim + 2
    }

    /// Width of `s ⊕ a ⊕ s'`.
    #[inline]
    pub fn feature_dim(&self) -> usize {
        2 * self.state_dim + self.action_dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn ensure_nonempty(&self, what: &'static str) -> Result<()> {
        if self.is_empty() {
            Err(Error::Empty(what))
        } else {
            Ok(())
        }
    }

    pub fn same_layout(&self, other: &TransitionDataset) -> bool {
        self.state_dim == other.state_dim && self.action_dim == other.action_dim
    }

    pub fn ensure_same_layout(&self, other: &TransitionDataset) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("state_dim={} action_dim={}", self.state_dim, self.action_dim),
                format!("state_dim={} action_dim={}", other.state_dim, other.action_dim),
            ))
        }
    }

    pub fn records(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn record(&self, i: usize) -> &[f32] {
        let n = self.record_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> Transition<'_> {
        let (s, a) = (self.state_dim, self.action_dim);
        let rec = self.record(i);
        Transition {
            state: &rec[..s],
            action: &rec[s..s + a],
            reward: rec[s + a],
            next_state: &rec[s + a + 1..2 * s + a + 1],
            terminal: rec[2 * s + a + 1] == 1.0,
        }
    }

    #[inline]
    pub fn origin(&self, i: usize) -> Origin {
        self.origins[i]
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn set_origin(&mut self, origin: Origin) {
        self.origins.iter_mut().for_each(|o| *o = origin);
    }

    /// Iterates over `s ⊕ a ⊕ s'` of row `i`.
    pub fn gap_features(&self, i: usize) -> impl Iterator<Item = f32> + '_ {
        let (s, a) = (self.state_dim, self.action_dim);
        let rec = self.record(i);
        rec[..s + a].iter().chain(&rec[s + a + 1..2 * s + a + 1]).copied()
    }

    /// Iterates over `s ⊕ a ⊕ r ⊕ s'` of row `i` (the generative layout).
    pub fn generative_features(&self, i: usize) -> impl Iterator<Item = f32> + '_ {
        let rec = self.record(i);
        rec[..rec.len() - 1].iter().copied()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> TransitionDataset {
        let mut out = TransitionDataset::with_capacity(self.state_dim, self.action_dim, indices.len());
        for &i in indices {
            out.data.extend_from_slice(self.record(i));
            out.origins.push(self.origins[i]);
        }
        out
    }

    /// Content hash over dimensions and raw row bytes (origin tags excluded).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.state_dim as u64).to_le_bytes());
        h.update((self.action_dim as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Rows of `a` followed by rows of `b`; origin tags are preserved.
pub fn concat(a: &TransitionDataset, b: &TransitionDataset) -> Result<TransitionDataset> {
    a.ensure_same_layout(b)?;
    a.ensure_nonempty("first dataset of concat")?;
    b.ensure_nonempty("second dataset of concat")?;
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    let mut origins = Vec::with_capacity(a.len() + b.len());
    origins.extend_from_slice(&a.origins);
    origins.extend_from_slice(&b.origins);
    Ok(TransitionDataset { state_dim: a.state_dim, action_dim: a.action_dim, data, origins })
}

/// Standard deviations below this are treated as constant dimensions.
pub const STD_GUARD: f64 = 1e-8;

/// Per-dimension population mean/std of `s ⊕ a ⊕ s'`, plus reward moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn std(&self) -> f64 {
        let s = libm::sqrt(self.m2 / self.n);
        if s < STD_GUARD {
            1.0
        } else {
            s
        }
    }
}

impl NormStats {
    pub fn compute(ds: &TransitionDataset) -> Result<Self> {
        Self::compute_union(&[ds])
    }

    /// Statistics over the union of several datasets with a shared layout.
    pub fn compute_union(parts: &[&TransitionDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("no datasets for normalization"))?;
        for p in parts {
            first.ensure_same_layout(p)?;
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        if total == 0 {
            return Err(Error::Empty("dataset for normalization"));
        }
        let dim = first.feature_dim();
        let mut feats = alloc::vec![Moments::default(); dim];
        let mut reward = Moments::default();
        for p in parts {
            for i in 0..p.len() {
                for (m, v) in feats.iter_mut().zip(p.gap_features(i)) {
                    m.push(v as f64);
                }
                reward.push(p.get(i).reward as f64);
            }
        }
        Ok(NormStats {
            mean: feats.iter().map(|m| m.mean).collect(),
            std: feats.iter().map(Moments::std).collect(),
            reward_mean: reward.mean,
            reward_std: reward.std(),
            count: total,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics that leave coordinates unchanged.
    pub fn identity(dim: usize) -> Self {
        NormStats { mean: alloc::vec![0.0; dim], std: alloc::vec![1.0; dim], reward_mean: 0.0, reward_std: 1.0, count: 0 }
    }

    /// Writes the z-normalized gap features of row `i` into `out`.
    pub fn normalize_row(&self, ds: &TransitionDataset, i: usize, out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(ds.gap_features(i)).zip(&self.mean).zip(&self.std) {
            *o = (v as f64 - m) / s;
        }
    }

    /// Z-normalized gap features of every row, row-major.
    pub fn normalize_dataset(&self, ds: &TransitionDataset) -> Result<Vec<f64>> {
        if ds.feature_dim() != self.dim() {
            return Err(Error::shape(format!("{} features", self.dim()), format!("{}", ds.feature_dim())));
        }
        let d = self.dim();
        let mut out = alloc::vec![0.0; ds.len() * d];
        for (i, chunk) in out.chunks_exact_mut(d).enumerate() {
            self.normalize_row(ds, i, chunk);
        }
        Ok(out)
    }
}
