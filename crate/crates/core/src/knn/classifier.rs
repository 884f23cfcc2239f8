//! Parametric domain classifiers, kept as a diagnostic and ablation baseline
//! for the neighbor scores.
//!
//! Two networks predict `p(target | s, a)` and `p(target | s, a, s')` from
//! the (imbalanced) union of source and target rows. Their logit difference
//! is the dynamics-gap reward penalty
//! `Δr = logit p(tar|s,a) − logit p(tar|s,a,s')`, clipped to `±PENALTY_CLIP`.

use alloc::{vec, vec::Vec};

use rand::seq::SliceRandom;

use crate::dataset::{NormStats, TransitionDataset};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Activation, AdamState, Matrix, Mlp};

pub const PENALTY_CLIP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: vec![256, 256], epochs: 1, batch_size: 256, lr: 3e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierScores {
    /// `p(target | s, a)` per source row.
    pub p_sa: Vec<f64>,
    /// `p(target | s, a, s')` per source row.
    pub p_sas: Vec<f64>,
    /// Clipped reward penalty per source row.
    pub penalty: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

struct Inputs {
    sa: Vec<f32>,
    sas: Vec<f32>,
}

fn inputs(ds: &TransitionDataset, norm: &NormStats) -> Inputs {
    let (s, a) = (ds.state_dim(), ds.action_dim());
    let d = ds.feature_dim();
    let mut row = vec![0.0f64; d];
    let mut sa = Vec::with_capacity(ds.len() * (s + a));
    let mut sas = Vec::with_capacity(ds.len() * d);
    for i in 0..ds.len() {
        norm.normalize_row(ds, i, &mut row);
        sa.extend(row[..s + a].iter().map(|&v| v as f32));
        sas.extend(row.iter().map(|&v| v as f32));
    }
    Inputs { sa, sas }
}

fn train_one(features: &[f32], width: usize, labels: &[f32], cfg: &ClassifierConfig, seed: u64) -> Result<Mlp> {
    let mut sizes = vec![width];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let mut init = rng::stream(seed, 0);
    let mut net = Mlp::new(&sizes, Activation::Relu, &mut init)?;
    let mut adam = AdamState::for_model(&net, cfg.lr);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut shuffle = rng::stream(seed, 1);
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(batch) {
            let x = Matrix::from_fn(chunk.len(), width, |r, c| features[chunk[r] * width + c]);
            let tape = net.forward_tape(&x)?;
            let scale = 1.0 / chunk.len() as f64;
            let g = Matrix::from_fn(chunk.len(), 1, |r, _| {
                let z = tape.output().get(r, 0) as f64;
                ((sigmoid(z) - labels[chunk[r]] as f64) * scale) as f32
            });
            let back = net.backward(&tape, &g)?;
            adam.update(&mut net, &back.grads)?;
        }
    }
    Ok(net)
}

fn logits(net: &Mlp, features: &[f32], width: usize) -> Result<Vec<f64>> {
    let n = features.len() / width;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(4096) {
        let end = (start + 4096).min(n);
        let x = Matrix::from_vec(end - start, width, features[start * width..end * width].to_vec())?;
        out.extend(net.forward(&x)?.as_slice().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Trains both classifiers on source (label 0) and target (label 1) rows and
/// scores every source row.
pub fn classifier_score(src: &TransitionDataset, tar: &TransitionDataset, cfg: &ClassifierConfig, seed: u64) -> Result<ClassifierScores> {
    src.ensure_nonempty("source dataset")?;
    tar.ensure_nonempty("target dataset")?;
    src.ensure_same_layout(tar)?;
    let norm = NormStats::compute_union(&[src, tar])?;
    let (s_in, t_in) = (inputs(src, &norm), inputs(tar, &norm));
    let w_sa = src.state_dim() + src.action_dim();
    let w_sas = src.feature_dim();
    let mut labels = vec![0.0f32; src.len()];
    labels.resize(src.len() + tar.len(), 1.0);
    let cat = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().chain(b).copied().collect() };

    let net_sa = train_one(&cat(&s_in.sa, &t_in.sa), w_sa, &labels, cfg, rng::derive_seed(seed, 10))?;
    let net_sas = train_one(&cat(&s_in.sas, &t_in.sas), w_sas, &labels, cfg, rng::derive_seed(seed, 11))?;

    let z_sa = logits(&net_sa, &s_in.sa, w_sa)?;
    let z_sas = logits(&net_sas, &s_in.sas, w_sas)?;
    let penalty = z_sa.iter().zip(&z_sas).map(|(a, b)| (a - b).clamp(-PENALTY_CLIP, PENALTY_CLIP)).collect();
    Ok(ClassifierScores { p_sa: z_sa.iter().map(|&z| sigmoid(z)).collect(), p_sas: z_sas.iter().map(|&z| sigmoid(z)).collect(), penalty })
}
