//! CSV outputs: score tables, histograms, training logs and metrics.

use std::fmt::Write as _;
use std::path::Path;

use dmc_core::diffusion::TrainLog;
use dmc_core::iql::MetricsRow;
use dmc_core::knn::ScoreTable;

use crate::error::{Error, Result};

/// `v` with 9 significant digits.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, v)
    } else {
        format!("{v:.8e}")
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `row,rho,rho_hat,weight`; rows are numbered from `first_row`.
pub fn write_scores(table: &ScoreTable, first_row: usize, path: &Path) -> Result<()> {
    write(path, &scores_text(table, first_row, 0..table.len()))
}

pub fn scores_text(table: &ScoreTable, first_row: usize, rows: std::ops::Range<usize>) -> String {
    let mut s = String::from("row,rho,rho_hat,weight\n");
    for i in rows.clone() {
        let _ = writeln!(s, "{},{},{},{}", first_row + i - rows.start, sig9(table.rho[i]), sig9(table.rho_hat[i]), sig9(table.weight[i]));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub row: usize,
    pub rho: f64,
    pub rho_hat: f64,
    pub weight: f64,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv { path: path.to_path_buf(), line: 0, reason: e.to_string() })?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::Csv { path: path.to_path_buf(), line: 1, reason: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != ["row", "rho", "rho_hat", "weight"] {
        return Err(Error::Csv { path: path.to_path_buf(), line: 1, reason: "header must be row,rho,rho_hat,weight".into() });
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Csv { path: path.to_path_buf(), line: 0, reason: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::Csv { path: path.to_path_buf(), line, reason: format!("bad {what}") };
        let f = |i: usize, what: &str| rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(what));
        out.push(ScoreRow {
            row: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("row"))?,
            rho: f(1, "rho")?,
            rho_hat: f(2, "rho_hat")?,
            weight: f(3, "weight")?,
        });
    }
    Ok(out)
}

/// Two-series histogram on shared bin edges.
pub fn write_histogram(path: &Path, columns: [&str; 2], edges: &[f64], a: &[usize], b: &[usize]) -> Result<()> {
    let mut s = format!("bin_left,bin_right,{},{}\n", columns[0], columns[1]);
    for i in 0..a.len() {
        let _ = writeln!(s, "{},{},{},{}", sig9(edges[i]), sig9(edges[i + 1]), a[i], b[i]);
    }
    write(path, &s)
}

/// Equal-width histogram of two samples over their joint range.
pub fn histogram2(a: &[f64], b: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    fixed_histogram2(a, b, bins, lo, if hi > lo { hi } else { lo + 1.0 })
}

/// Equal-width histogram on `[lo, hi]`; values outside are clamped to the
/// end bins.
pub fn fixed_histogram2(a: &[f64], b: &[f64], bins: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in xs {
            let i = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            c[i] += 1;
        }
        c
    };
    (edges, count(a), count(b))
}

pub fn write_train_log(path: &Path, log: &[TrainLog]) -> Result<()> {
    let mut s = String::from("step,train_loss,holdout_loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.step, sig9(r.train_loss), sig9(r.holdout_loss));
    }
    write(path, &s)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
    let mut s = String::from("step,loss_v,loss_q,loss_pi,mean_omega,frac_selected,eval_return,eval_ns\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            sig9(r.loss_v),
            sig9(r.loss_q),
            sig9(r.loss_pi),
            sig9(r.mean_omega),
            sig9(r.frac_selected),
            opt(r.eval_return),
            opt(r.eval_ns)
        );
    }
    write(path, &s)
}
