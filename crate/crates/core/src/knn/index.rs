//! Exact k-d tree over z-normalized points.
//!
//! Points are first rotated onto their principal axes (distances are
//! unchanged) so that axis-aligned cells follow correlated features such as
//! `s` and `s'`. Internal nodes split at the median of the widest rotated
//! coordinate; leaves hold up to [`LEAF_SIZE`] points. Queries track the
//! squared distance to the current cell incrementally, one offset per
//! dimension.
//!
//! Leaf scans use single-precision copies of the rotated points in SIMD
//! blocks purely as a filter: any point whose filtered distance lies within a
//! proven error margin of the running k-th best is kept as a candidate, and
//! the reported distances are recomputed exactly from the original
//! double-precision points with [`sq_dist`].

use alloc::{vec, vec::Vec};

use crate::dataset::{NormStats, TransitionDataset};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 64;
const LEAF: u32 = u32::MAX;
/// Points per SIMD block inside a leaf.
const LANES: usize = 16;
/// Coordinate used to pad partial blocks; its distance to any real query is
/// far beyond every pruning bound.
const PAD: f32 = 1e15;

/// Leading rotated dimensions summed before the first rejection test.
const EARLY_EXIT_DIMS: usize = 10;

/// Adds squared coordinate differences for one dimension-major block.
#[inline(always)]
fn accumulate(acc: &mut [f32; LANES], cols: &[f32], q: &[f32]) {
    for (col, &qj) in cols.chunks_exact(LANES).zip(q) {
        for l in 0..LANES {
            let t = col[l] - qj;
            acc[l] += t * t;
        }
    }
}

/// Relative slack on pruning bounds; the incremental cell distance carries
/// rounding error and must never prune a cell that could hold a neighbor.
const PRUNE_SLACK: f64 = 1e-9;

/// Bound on the error of single-precision filter distances, relative to
/// `|q|² + |p|² + d`. Filter distances only shortlist candidates; every
/// reported distance is recomputed in double precision.
const FILTER_REL_ERR: f64 = 1e-5;

/// Squared Euclidean distance. This is the single definition of distance used
/// by every neighbor query in the crate.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            let d = x[j] - y[j];
            acc[j] += d * d;
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        let d = x - y;
        acc[j] += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[derive(Debug, Clone, Copy)]
struct Node {
    split: f64,
    /// Split dimension, or [`LEAF`].
    dim: u32,
    /// Internal: index of the right child (the left child is `self + 1`).
    /// Leaf: first point slot.
    a: u32,
    /// Leaf: one past the last point slot.
    b: u32,
    /// Leaf: offset of the first block in `blocks`.
    blk: u32,
}

/// Immutable exact nearest-neighbor index.
#[derive(Debug, Clone)]
pub struct NnIndex {
    dim: usize,
    /// Points in storage order, full precision.
    points: Vec<f64>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
    /// Orthonormal rotation onto the principal axes of the points, row-major.
    /// The tree and the filter work in rotated coordinates.
    rot: Vec<f64>,
    /// Rotated leaf points in single precision, blocks of `LANES` points
    /// laid out dimension-major.
    blocks: Vec<f32>,
    max_norm2: f64,
}

/// The `k` smallest values seen so far, ascending.
struct Best {
    d: [f64; Best::CAP],
    len: usize,
    k: usize,
}

impl Best {
    const CAP: usize = 64;

    fn new(k: usize) -> Self {
        Best { d: [f64::INFINITY; Best::CAP], len: 0, k }
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.len < self.k {
            f64::INFINITY
        } else {
            self.d[self.k - 1]
        }
    }

    #[inline]
    fn insert(&mut self, v: f64) {
        let mut i = if self.len < self.k {
            self.len += 1;
            self.len - 1
        } else {
            self.k - 1
        };
        while i > 0 && self.d[i - 1] > v {
            self.d[i] = self.d[i - 1];
            i -= 1;
        }
        self.d[i] = v;
    }
}

/// Per-query search state: approximate best list plus every slot that may
/// still belong to the exact answer.
struct Search {
    /// Rotated query.
    q: [f64; 64],
    q32: [f32; 64],
    off: [f64; 64],
    best: Best,
    /// Absolute filter error allowance excluding the distance-proportional part.
    err0: f64,
    bound: f64,
    cand: Vec<(f32, u32)>,
}

impl Search {
    #[inline]
    fn refresh_bound(&mut self) {
        let w = self.best.worst();
        self.bound = if w.is_finite() { w + 2.0 * (self.err0 + FILTER_REL_ERR * w) } else { f64::INFINITY };
    }
}

/// Applies the self-exclusion rule to ascending squared distances holding at
/// least `k` (or `k + 1` when excluding) entries: one exact zero-distance
/// match is skipped if present.
#[inline]
pub(crate) fn kth_with_exclusion(sorted: &[f64], k: usize, exclude_self: bool) -> f64 {
    if exclude_self && sorted[0] == 0.0 {
        sorted[k]
    } else {
        sorted[k - 1]
    }
}

impl NnIndex {
    /// Builds an index over row-major points of width `dim`.
    pub fn from_points(points: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point dimension must be at least 1"));
        }
        if dim > 64 {
            return Err(Error::invalid("point dimension above 64 is not supported"));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::shape(alloc::format!("multiple of {dim} values"), alloc::format!("{}", points.len())));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::Empty("points for neighbor index"));
        }
        if n > u32::MAX as usize / 4 {
            return Err(Error::invalid("too many points for neighbor index"));
        }
        if let Some(index) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "index points", index });
        }
        if points.iter().any(|v| v.abs() > 1e12) {
            return Err(Error::invalid("index coordinates must lie within ±1e12"));
        }
        let rot = principal_axes(points, dim);
        let mut rotated = vec![0.0; points.len()];
        for (p, r) in points.chunks_exact(dim).zip(rotated.chunks_exact_mut(dim)) {
            rotate(&rot, p, r);
        }
        let mut perm: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::with_capacity(4 * n / LEAF_SIZE + 2);
        build(&rotated, dim, &mut perm, 0, &mut nodes);
        let mut stored = Vec::with_capacity(points.len());
        for &p in &perm {
            stored.extend_from_slice(&points[p as usize * dim..(p as usize + 1) * dim]);
        }
        let max_norm2 = stored.chunks_exact(dim).map(|p| p.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let mut blocks = Vec::new();
        for node in nodes.iter_mut().filter(|n| n.dim == LEAF) {
            node.blk = (blocks.len() / (LANES * dim)) as u32;
            for first in (node.a..node.b).step_by(LANES) {
                let count = (node.b - first).min(LANES as u32) as usize;
                let base = blocks.len();
                blocks.resize(base + LANES * dim, PAD);
                for l in 0..count {
                    let id = perm[first as usize + l] as usize;
                    let p = &rotated[id * dim..(id + 1) * dim];
                    for (j, &v) in p.iter().enumerate() {
                        blocks[base + j * LANES + l] = v as f32;
                    }
                }
            }
        }
        Ok(NnIndex { dim, points: stored, ids: perm, nodes, rot, blocks, max_norm2 })
    }

    /// Builds an index over the gap features of `ds`, z-normalized by `norm`.
    pub fn build(ds: &TransitionDataset, norm: &NormStats) -> Result<Self> {
        let pts = norm.normalize_dataset(ds)?;
        Self::from_points(&pts, ds.feature_dim())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indexed points in storage (tree) order, with their original row ids.
    pub fn stored_points(&self) -> (&[f64], &[u32]) {
        (&self.points, &self.ids)
    }

    fn check_query(&self, query: &[f64], k: usize, exclude_self: bool) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::shape(alloc::format!("query of width {}", self.dim), alloc::format!("{}", query.len())));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let needed = if exclude_self { k + 1 } else { k };
        if needed > Best::CAP {
            return Err(Error::invalid(alloc::format!("k={k} exceeds the supported maximum of {}", Best::CAP - 1)));
        }
        if needed > self.len() {
            return Err(Error::NotEnoughNeighbors { k, available: self.len() - usize::from(exclude_self) });
        }
        Ok(())
    }

    fn check_coords(query: &[f64]) -> Result<()> {
        if let Some(index) = query.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "query", index });
        }
        if query.iter().any(|v| v.abs() > 1e12) {
            return Err(Error::invalid("query coordinates must lie within ±1e12"));
        }
        Ok(())
    }

    /// The `count` smallest exact squared distances from `query`, ascending,
    /// written to `out`. `cand` is scratch space.
    fn nearest_sq(&self, query: &[f64], count: usize, cand: &mut Vec<(f32, u32)>, out: &mut [f64]) {
        let qn2: f64 = query.iter().map(|v| v * v).sum();
        let mut st = Search {
            q: [0.0; 64],
            q32: [0.0; 64],
            off: [0.0; 64],
            best: Best::new(count),
            err0: FILTER_REL_ERR * (qn2 + self.max_norm2),
            bound: f64::INFINITY,
            cand: core::mem::take(cand),
        };
        st.cand.clear();
        rotate(&self.rot, query, &mut st.q[..self.dim]);
        for (d, &v) in st.q32.iter_mut().zip(&st.q[..self.dim]) {
            *d = v as f32;
        }
        self.search(0, 0.0, &mut st);
        let bound = st.bound;
        let mut exact = Best::new(count);
        for &(approx, slot) in &st.cand {
            if (approx as f64) <= bound {
                let p = &self.points[slot as usize * self.dim..(slot as usize + 1) * self.dim];
                let d = sq_dist(query, p);
                if d < exact.worst() || exact.len < count {
                    exact.insert(d);
                }
            }
        }
        out[..count].copy_from_slice(&exact.d[..count]);
        *cand = st.cand;
    }

    fn scan_leaf(&self, n: Node, st: &mut Search) {
        let d = self.dim;
        // Rotated coordinates come in decreasing-variance order, so a partial
        // sum over the leading ones already rejects most far blocks. Partial
        // sums of non-negative terms never exceed the full sum.
        let head = d.min(EARLY_EXIT_DIMS);
        let mut first = n.a;
        let mut blk = n.blk as usize * LANES * d;
        while first < n.b {
            let block = &self.blocks[blk..blk + LANES * d];
            let count = (n.b - first).min(LANES as u32) as usize;
            first += LANES as u32;
            blk += LANES * d;
            let mut acc = [0.0f32; LANES];
            let (lead, rest) = block.split_at(head * LANES);
            accumulate(&mut acc, lead, &st.q32[..head]);
            if head < d {
                let lo = acc.iter().fold(f32::INFINITY, |m, &v| m.min(v));
                if lo as f64 > st.bound {
                    continue;
                }
                accumulate(&mut acc, rest, &st.q32[head..d]);
            }
            if acc.iter().fold(f32::INFINITY, |m, &v| m.min(v)) as f64 > st.bound {
                continue;
            }
            let base = first - LANES as u32;
            for (l, &a) in acc[..count].iter().enumerate() {
                let a64 = a as f64;
                if a64 <= st.bound {
                    st.cand.push((a, base + l as u32));
                    if a64 < st.best.worst() {
                        st.best.insert(a64);
                        st.refresh_bound();
                    }
                }
            }
        }
    }

    fn search(&self, node: usize, rd: f64, st: &mut Search) {
        let n = self.nodes[node];
        if n.dim == LEAF {
            self.scan_leaf(n, st);
            return;
        }
        let dim = n.dim as usize;
        let diff = st.q[dim] - n.split;
        let (near, far) = if diff < 0.0 { (node + 1, n.a as usize) } else { (n.a as usize, node + 1) };
        self.search(near, rd, st);
        let old = st.off[dim];
        let far_rd = rd - old * old + diff * diff;
        if far_rd * (1.0 - PRUNE_SLACK) <= st.bound {
            st.off[dim] = diff;
            self.search(far, far_rd, st);
            st.off[dim] = old;
        }
    }

    /// Euclidean distance from `query` to its k-th nearest indexed point.
    ///
    /// With `exclude_self`, exactly one zero-distance match (the query's own
    /// copy) is skipped; further exact duplicates still count as neighbors.
    pub fn knn_distance(&self, query: &[f64], k: usize, exclude_self: bool) -> Result<f64> {
        self.check_query(query, k, exclude_self)?;
        Self::check_coords(query)?;
        let count = if exclude_self { k + 1 } else { k };
        let mut out = [0.0f64; Best::CAP];
        self.nearest_sq(query, count, &mut Vec::new(), &mut out);
        Ok(libm::sqrt(kth_with_exclusion(&out[..count], k, exclude_self)))
    }

    /// [`knn_distance`](Self::knn_distance) for every row of `queries`,
    /// evaluated in parallel when the `std` feature is on.
    pub fn knn_distances(&self, queries: &[f64], k: usize, exclude_self: bool) -> Result<Vec<f64>> {
        let d = self.dim;
        if !queries.len().is_multiple_of(d) {
            return Err(Error::shape(alloc::format!("multiple of {d} values"), alloc::format!("{}", queries.len())));
        }
        let n = queries.len() / d;
        if n == 0 {
            return Ok(Vec::new());
        }
        self.check_query(&queries[..d], k, exclude_self)?;
        Self::check_coords(queries)?;
        let count = if exclude_self { k + 1 } else { k };
        let mut out = vec![0.0f64; n];
        let chunk = |o: &mut [f64], q: &[f64]| {
            let mut cand = Vec::new();
            let mut buf = [0.0f64; Best::CAP];
            for (o, q) in o.iter_mut().zip(q.chunks_exact(d)) {
                self.nearest_sq(q, count, &mut cand, &mut buf);
                *o = libm::sqrt(kth_with_exclusion(&buf[..count], k, exclude_self));
            }
        };
        #[cfg(feature = "std")]
        {
            use rayon::prelude::*;
            out.par_chunks_mut(256).zip(queries.par_chunks(256 * d)).for_each(|(o, q)| chunk(o, q));
        }
        #[cfg(not(feature = "std"))]
        chunk(&mut out, queries);
        Ok(out)
    }

    /// k-th neighbor distance of every indexed point against this index,
    /// returned in original row order. Queries run in storage order for
    /// locality.
    pub fn self_knn_distances(&self, k: usize, exclude_self: bool) -> Result<Vec<f64>> {
        let stored = self.knn_distances(&self.points, k, exclude_self)?;
        Ok(self.unpermute(&stored))
    }

    /// Maps values computed in storage order back to original row order.
    pub fn unpermute(&self, stored_order: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; stored_order.len()];
        for (&id, &v) in self.ids.iter().zip(stored_order) {
            out[id as usize] = v;
        }
        out
    }
}

fn rotate(rot: &[f64], p: &[f64], out: &mut [f64]) {
    let d = p.len();
    for (o, axis) in out.iter_mut().zip(rot.chunks_exact(d)) {
        *o = axis.iter().zip(p).map(|(a, b)| a * b).sum();
    }
}

/// Eigenvectors of the covariance of `points` by cyclic Jacobi rotations,
/// returned as the rows of an orthonormal matrix ordered by decreasing
/// variance.
fn principal_axes(points: &[f64], dim: usize) -> Vec<f64> {
    let n = (points.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut a = vec![0.0; dim * dim];
    let mut c = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        c.iter_mut().zip(p.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..dim {
            for j in i..dim {
                a[i * dim + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            a[i * dim + j] = a[j * dim + i];
        }
    }
    let mut v = vec![0.0; dim * dim];
    (0..dim).for_each(|i| v[i * dim + i] = 1.0);
    for _ in 0..64 {
        let off: f64 = (0..dim)
            .flat_map(|i| (0..dim).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * dim + j] * a[i * dim + j])
            .sum();
        let diag: f64 = (0..dim).map(|i| a[i * dim + i] * a[i * dim + i]).sum();
        if off <= 1e-30 * diag || off == 0.0 {
            break;
        }
        for p in 0..dim {
            for q in p + 1..dim {
                let apq = a[p * dim + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * dim + q] - a[p * dim + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / libm::sqrt(t * t + 1.0);
                let sn = t * cs;
                for k in 0..dim {
                    let (akp, akq) = (a[k * dim + p], a[k * dim + q]);
                    a[k * dim + p] = cs * akp - sn * akq;
                    a[k * dim + q] = sn * akp + cs * akq;
                }
                for k in 0..dim {
                    let (apk, aqk) = (a[p * dim + k], a[q * dim + k]);
                    a[p * dim + k] = cs * apk - sn * aqk;
                    a[q * dim + k] = sn * apk + cs * aqk;
                }
                for k in 0..dim {
                    let (vkp, vkq) = (v[k * dim + p], v[k * dim + q]);
                    v[k * dim + p] = cs * vkp - sn * vkq;
                    v[k * dim + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| a[j * dim + j].total_cmp(&a[i * dim + i]));
    let mut rot = vec![0.0; dim * dim];
    for (r, &col) in order.iter().enumerate() {
        for k in 0..dim {
            rot[r * dim + k] = v[k * dim + col];
        }
    }
    rot
}

fn leaf(offset: usize, len: usize) -> Node {
    Node { split: 0.0, dim: LEAF, a: offset as u32, b: (offset + len) as u32, blk: 0 }
}

fn build(points: &[f64], dim: usize, perm: &mut [u32], offset: usize, nodes: &mut Vec<Node>) {
    let here = nodes.len();
    if perm.len() <= LEAF_SIZE {
        nodes.push(leaf(offset, perm.len()));
        return;
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &p in perm.iter() {
        let row = &points[p as usize * dim..(p as usize + 1) * dim];
        for j in 0..dim {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let (split_dim, spread) = (0..dim).map(|j| (j, hi[j] - lo[j])).fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if spread <= 0.0 {
        // All points identical: one leaf regardless of size.
        nodes.push(leaf(offset, perm.len()));
        return;
    }
    let mid = perm.len() / 2;
    let key = |p: &u32| points[*p as usize * dim + split_dim];
    perm.select_nth_unstable_by(mid, |a, b| key(a).total_cmp(&key(b)));
    let split = key(&perm[mid]);
    nodes.push(Node { split, dim: split_dim as u32, a: 0, b: 0, blk: 0 });
    let (left, right) = perm.split_at_mut(mid);
    build(points, dim, left, offset, nodes);
    let right_idx = nodes.len();
    build(points, dim, right, offset + mid, nodes);
    nodes[here].a = right_idx as u32;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn brute(points: &[f64], dim: usize, q: &[f64], k: usize, exclude_self: bool) -> f64 {
        let mut d: Vec<f64> = points.chunks_exact(dim).map(|p| sq_dist(q, p)).collect();
        d.sort_by(f64::total_cmp);
        libm::sqrt(kth_with_exclusion(&d, k, exclude_self))
    }

    #[test]
    fn single_point_cannot_exclude_itself() {
        let idx = NnIndex::from_points(&[0.5], 1).unwrap();
        assert_eq!(idx.knn_distance(&[0.5], 1, true).unwrap_err(), Error::NotEnoughNeighbors { k: 1, available: 0 });
        assert_eq!(idx.knn_distance(&[0.5], 1, false).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_lookup() {
        let idx = NnIndex::from_points(&[0.0, 1.0, 3.0], 1).unwrap();
        assert!((idx.knn_distance(&[0.9], 1, false).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn self_exclusion_skips_exactly_one_zero() {
        let idx = NnIndex::from_points(&[0.0, 1.0, 3.0, 3.0], 1).unwrap();
        assert_eq!(idx.knn_distance(&[1.0], 1, false).unwrap(), 0.0);
        assert_eq!(idx.knn_distance(&[1.0], 1, true).unwrap(), 1.0);
        // A duplicate of the query still counts once the self-match is skipped.
        assert_eq!(idx.knn_distance(&[3.0], 1, true).unwrap(), 0.0);
        assert_eq!(idx.knn_distance(&[3.0], 2, true).unwrap(), 2.0);
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(matches!(NnIndex::from_points(&[0.0, f64::NAN], 1), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn matches_brute_force_on_random_cloud() {
        let mut rng = rng_from_seed(5);
        let dim = 3;
        let pts: Vec<f64> = (0..5000 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let idx = NnIndex::from_points(&pts, dim).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect();
            assert_eq!(idx.knn_distance(&q, 5, false).unwrap(), brute(&pts, dim, &q, 5, false));
        }
        let all = idx.self_knn_distances(3, true).unwrap();
        for i in (0..5000).step_by(97) {
            let q = &pts[i * dim..(i + 1) * dim];
            assert_eq!(all[i], brute(&pts, dim, q, 3, true));
        }
    }

    #[test]
    fn duplicate_heavy_cloud() {
        let pts: Vec<f64> = (0..300).map(|i| (i % 7) as f64).collect();
        let idx = NnIndex::from_points(&pts, 1).unwrap();
        for i in 0..300 {
            for k in [1, 5, 40, 43, 44] {
                assert_eq!(idx.knn_distance(&pts[i..i + 1], k, true).unwrap(), brute(&pts, 1, &pts[i..i + 1], k, true));
            }
        }
    }
}
