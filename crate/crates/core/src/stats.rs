//! Small descriptive-statistics helpers shared by scoring, sampling and the
//! diagnostics.

use alloc::{vec, vec::Vec};

use crate::error::{Error, Result};

/// Linearly interpolated percentile (`pct` in `[0, 100]`) of ascending data.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("values for percentile"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::invalid(alloc::format!("percentile {pct} outside [0, 100]")));
    }
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 || sorted[lo] == sorted[hi] {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let m = mean(values);
    if n < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (m, libm::sqrt(var / n as f64))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

/// One-sided Mann-Whitney rank-sum test of "`x` tends to be smaller than
/// `y`", normal approximation with tie and continuity corrections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTest {
    /// `U` statistic of `x`: pairs with `x < y` count 1, ties 1/2, against.
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
}

pub fn rank_sum_less(x: &[f64], y: &[f64]) -> Result<RankTest> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("rank test sample"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "rank test sample", index: 0 });
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let (mut rank_x, mut tie_term) = (0.0, 0.0);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        rank_x += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    // Large rank sum of x means x is large; U below counts pairs x > y.
    let u_greater = rank_x - n1 * (n1 + 1.0) / 2.0;
    let u = n1 * n2 - u_greater;
    let nt = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
    if var <= 0.0 {
        return Ok(RankTest { u, z: 0.0, p_value: 1.0 });
    }
    let z = (u - n1 * n2 / 2.0 - 0.5) / libm::sqrt(var);
    Ok(RankTest { u, z, p_value: 1.0 - normal_cdf(z) })
}

/// Energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` between two row-major point
/// sets, within-set terms over distinct pairs.
pub fn energy_distance(x: &[f64], y: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !x.len().is_multiple_of(dim) || !y.len().is_multiple_of(dim) {
        return Err(Error::invalid("energy distance inputs must be whole rows"));
    }
    let (n, m) = (x.len() / dim, y.len() / dim);
    if n < 2 || m < 2 {
        return Err(Error::Empty("energy distance needs two rows per set"));
    }
    let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
    let cross = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in a.chunks_exact(dim) {
            for q in b.chunks_exact(dim) {
                s += dist(p, q);
            }
        }
        s
    };
    let within = |a: &[f64], k: usize| -> f64 {
        let rows: Vec<&[f64]> = a.chunks_exact(dim).collect();
        let mut s = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                s += dist(rows[i], rows[j]);
            }
        }
        2.0 * s / (k * (k - 1)) as f64
    };
    Ok(2.0 * cross(x, y) / (n * m) as f64 - within(x, n) - within(y, m))
}

/// Histograms of several series over shared, equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedHistogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    /// One count vector per input series.
    pub counts: Vec<Vec<usize>>,
}

impl SharedHistogram {
    /// Bins spanning `[min, max]` over all series. A degenerate range gets a
    /// unit-wide bin window centred on the common value.
    pub fn new(series: &[&[f64]], bins: usize) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in series {
            for &v in s.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { context: "histogram input", index: 0 });
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            return Err(Error::Empty("histogram input"));
        }
        if hi - lo <= 0.0 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self::with_range(series, bins, lo, hi)
    }

    pub fn with_range(series: &[&[f64]], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if !(hi > lo) {
            return Err(Error::invalid("histogram range must be increasing"));
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let counts = series
            .iter()
            .map(|s| {
                let mut c = vec![0usize; bins];
                for &v in s.iter() {
                    if v < lo || v > hi {
                        continue;
                    }
                    let b = (((v - lo) / width) as usize).min(bins - 1);
                    c[b] += 1;
                }
                c
            })
            .collect();
        Ok(SharedHistogram { edges, counts })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }
}
