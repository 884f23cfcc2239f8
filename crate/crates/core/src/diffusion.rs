//! Score-conditioned diffusion over transition vectors `s ⊕ a ⊕ r ⊕ s'`.
//!
//! The denoiser predicts the clean vector directly from a noisy one. Its
//! input is `[c_in·x, cond, mask, ln σ / 4]`: the noisy vector scaled by
//! `c_in = 1/sqrt(σ² + 1)`, the normalized proximity weight `w` of the row
//! (or `0` for the null token), a mask channel that is `+1` when conditioned
//! and `−1` for the null token, and the log noise level.
//!
//! Sampling runs a deterministic Euler reverse process with classifier-free
//! guidance: `ε̂ = (x − G(x))/σ`, `ε̂_w = w·ε̂_cond + (1 − w)·ε̂_uncond`.

use alloc::{format, vec, vec::Vec};

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::dataset::{concat, NormStats, Origin, TransitionDataset};
use crate::error::{Error, Result};
use crate::knn::{GapScorer, ScoreTable};
use crate::rng::{self, fill_normal, Rng};
use crate::stats::{percentile_sorted, sorted_copy};
use crate::tensor::{Activation, AdamState, Matrix, Mlp};

/// Extra denoiser inputs after the data vector: condition, mask, noise level.
pub const EXTRA_INPUTS: usize = 3;
/// Rows per sampler batch; each batch draws from its own seed stream.
pub const SAMPLE_BATCH: usize = 1024;

pub const MASK_ON: f32 = 1.0;
pub const MASK_NULL: f32 = -1.0;

/// Noise levels `σ⁰ = 0 < σ¹ < … < σᵀ = σ_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    /// Power interpolation between `σ_min` (t = 1) and `σ_max` (t = T) in
    /// `σ^(1/ρ)` space, with `σ⁰ = 0` prepended.
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("noise schedule needs at least 2 steps, got {steps}")));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::invalid(format!("need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("schedule exponent must be positive, got {rho}")));
        }
        let (lo, hi) = (libm::pow(sigma_min, 1.0 / rho), libm::pow(sigma_max, 1.0 / rho));
        let mut sigmas = vec![0.0];
        for t in 1..=steps {
            let frac = (steps - t) as f64 / (steps - 1) as f64;
            sigmas.push(libm::pow(hi + frac * (lo - hi), rho));
        }
        sigmas[1] = sigma_min;
        sigmas[steps] = sigma_max;
        if sigmas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("noise schedule is not strictly increasing"));
        }
        Ok(NoiseSchedule { sigmas, sigma_min, sigma_max, rho })
    }

    /// Number of noisy levels `T`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    /// All `T + 1` levels, starting with `σ⁰ = 0`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub schedule_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Probability of replacing the condition with the null token.
    pub null_prob: f64,
    /// Fraction of rows held out for the monitoring loss.
    pub holdout_frac: f64,
    /// Hold-out loss is recorded every this many steps (and at the end).
    pub log_every: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            hidden: vec![256, 256],
            train_steps: 20_000,
            batch_size: 256,
            lr: 3e-4,
            schedule_steps: 18,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            null_prob: 0.25,
            holdout_frac: 0.05,
            log_every: 1000,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule_steps, self.sigma_min, self.sigma_max, self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch size and log interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.null_prob) {
            return Err(Error::invalid(format!("null-token probability {} outside [0, 1)", self.null_prob)));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::invalid(format!("hold-out fraction {} outside [0, 1)", self.holdout_frac)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Classifier-free guidance coefficient `w`.
    pub guidance: f64,
    /// Conditions are percentiles drawn uniformly from `[kappa, 100]`.
    pub kappa: f64,
    pub count: usize,
    /// Reverse-process steps; the levels use the model's `σ` range and `ρ`.
    pub sampler_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { guidance: 1.5, kappa: 90.0, count: 1_000_000, sampler_steps: 18 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.guidance.is_finite() {
            return Err(Error::invalid("guidance coefficient must be finite"));
        }
        if !(0.0..100.0).contains(&self.kappa) {
            return Err(Error::invalid(format!("kappa {} outside [0, 100)", self.kappa)));
        }
        if self.count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if self.sampler_steps < 2 {
            return Err(Error::invalid("sampler needs at least 2 steps"));
        }
        Ok(())
    }
}

/// Trained denoiser plus everything needed to map between data units and
/// the network's normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    /// Per-dimension mean/std of `s ⊕ a ⊕ r ⊕ s'` over the training source.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Condition values are fed as `(w − cond_mean) / cond_std`.
    pub cond_mean: f64,
    pub cond_std: f64,
    pub trained_steps: usize,
}

/// Hold-out loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub step: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

/// Per-row noise estimates at one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimates {
    pub cond: Matrix,
    pub uncond: Matrix,
}

/// `w·ε̂_cond + (1 − w)·ε̂_uncond`, elementwise.
pub fn guided_noise(est: &NoiseEstimates, w: f32) -> Matrix {
    let mut out = est.uncond.clone();
    for (o, &c) in out.as_mut_slice().iter_mut().zip(est.cond.as_slice()) {
        *o = w * c + (1.0 - w) * *o;
    }
    out
}

/// Mean squared error over rows and dimensions, and its gradient.
pub fn denoising_loss(pred: &Matrix, clean: &Matrix) -> Result<(f64, Matrix)> {
    if pred.rows() != clean.rows() || pred.cols() != clean.cols() {
        return Err(Error::shape(format!("{}x{}", clean.rows(), clean.cols()), format!("{}x{}", pred.rows(), pred.cols())));
    }
    let n = (pred.rows() * pred.cols()).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for ((g, &p), &c) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(clean.as_slice()) {
        let d = p as f64 - c as f64;
        loss += d * d;
        *g = (2.0 * d / n) as f32;
    }
    Ok((loss / n, grad))
}

fn generative_stats(ds: &TransitionDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let ns = NormStats::compute(ds)?;
    let (s, a) = (ds.state_dim(), ds.action_dim());
    let mut mean = ns.mean[..s + a].to_vec();
    let mut std = ns.std[..s + a].to_vec();
    mean.push(ns.reward_mean);
    std.push(ns.reward_std);
    mean.extend_from_slice(&ns.mean[s + a..]);
    std.extend_from_slice(&ns.std[s + a..]);
    Ok((mean, std))
}

fn c_in(sigma: f64) -> f32 {
    (1.0 / libm::sqrt(sigma * sigma + 1.0)) as f32
}

fn sigma_feature(sigma: f64) -> f32 {
    (libm::log(sigma) / 4.0) as f32
}

impl DenoiserModel {
    pub fn data_dim(&self) -> usize {
        2 * self.state_dim + self.action_dim + 1
    }

    /// Checks internal consistency (used after loading a checkpoint).
    pub fn validate(&self) -> Result<()> {
        let d = self.data_dim();
        if self.net.input_dim() != d + EXTRA_INPUTS || self.net.output_dim() != d {
            return Err(Error::shape(
                format!("denoiser {} -> {}", d + EXTRA_INPUTS, d),
                format!("{} -> {}", self.net.input_dim(), self.net.output_dim()),
            ));
        }
        if self.mean.len() != d || self.std.len() != d {
            return Err(Error::shape(format!("{d} normalization entries"), format!("{}", self.mean.len())));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) || !(self.cond_std > 0.0) {
            return Err(Error::invalid("normalization scales must be positive"));
        }
        Ok(())
    }

    /// Normalized generative vectors of every row, row-major.
    pub fn normalize(&self, ds: &TransitionDataset) -> Result<Vec<f32>> {
        if ds.state_dim() != self.state_dim || ds.action_dim() != self.action_dim {
            return Err(Error::shape(
                format!("state_dim {}, action_dim {}", self.state_dim, self.action_dim),
                format!("state_dim {}, action_dim {}", ds.state_dim(), ds.action_dim()),
            ));
        }
        let mut out = Vec::with_capacity(ds.len() * self.data_dim());
        for i in 0..ds.len() {
            for ((v, m), s) in ds.generative_features(i).zip(&self.mean).zip(&self.std) {
                out.push(((v as f64 - m) / s) as f32);
            }
        }
        Ok(out)
    }

    /// Maps normalized vectors back to data units as source-generated rows
    /// with `terminal = 0`.
    pub fn denormalize(&self, rows: &[f32]) -> Result<TransitionDataset> {
        let d = self.data_dim();
        if !rows.len().is_multiple_of(d) {
            return Err(Error::shape(format!("multiple of {d} values"), format!("{}", rows.len())));
        }
        let mut data = Vec::with_capacity(rows.len() / d * (d + 1));
        for row in rows.chunks_exact(d) {
            for ((&v, m), s) in row.iter().zip(&self.mean).zip(&self.std) {
                data.push((v as f64 * s + m) as f32);
            }
            data.push(0.0);
        }
        TransitionDataset::from_records(self.state_dim, self.action_dim, data, Origin::SourceGenerated)
    }

    fn cond_feature(&self, w: f64) -> f32 {
        ((w - self.cond_mean) / self.cond_std) as f32
    }

    /// Network input for normalized noisy vectors `x` at level `sigma`;
    /// `cond` holds raw weights per row, `None` selects the null token.
    fn input(&self, x: &[f32], sigma: f64, cond: Option<&[f64]>) -> Matrix {
        let d = self.data_dim();
        let rows = x.len() / d;
        let (scale, level) = (c_in(sigma), sigma_feature(sigma));
        let mut m = Matrix::zeros(rows, d + EXTRA_INPUTS);
        for r in 0..rows {
            let dst = m.row_mut(r);
            for (o, &v) in dst[..d].iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *o = scale * v;
            }
            match cond {
                Some(c) => {
                    dst[d] = self.cond_feature(c[r]);
                    dst[d + 1] = MASK_ON;
                }
                None => {
                    dst[d] = 0.0;
                    dst[d + 1] = MASK_NULL;
                }
            }
            dst[d + 2] = level;
        }
        m
    }

    /// Clean-vector prediction `G(x, cond, σ)` in normalized units.
    pub fn denoise(&self, x: &Matrix, sigma: f64, cond: Option<&[f64]>) -> Result<Matrix> {
        self.check_batch(x, cond)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("noise level must be positive, got {sigma}")));
        }
        self.net.forward(&self.input(x.as_slice(), sigma, cond))
    }

    fn check_batch(&self, x: &Matrix, cond: Option<&[f64]>) -> Result<()> {
        if x.cols() != self.data_dim() {
            return Err(Error::shape(format!("{} columns", self.data_dim()), format!("{}", x.cols())));
        }
        if let Some(c) = cond {
            if c.len() != x.rows() {
                return Err(Error::shape(format!("{} conditions", x.rows()), format!("{}", c.len())));
            }
            if let Some(index) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "condition", index });
            }
        }
        Ok(())
    }

    fn noise_from(&self, x: &Matrix, denoised: &Matrix, sigma: f64) -> Matrix {
        let s = sigma as f32;
        let mut eps = x.clone();
        for (e, &d) in eps.as_mut_slice().iter_mut().zip(denoised.as_slice()) {
            *e = (*e - d) / s;
        }
        eps
    }

    /// Unconditional noise estimate `(x − G(x, ∅, σ))/σ`.
    pub fn uncond_noise(&self, x: &Matrix, sigma: f64) -> Result<Matrix> {
        Ok(self.noise_from(x, &self.denoise(x, sigma, None)?, sigma))
    }

    /// Conditional and unconditional noise estimates at one level.
    pub fn noise_estimates(&self, x: &Matrix, sigma: f64, cond: &[f64]) -> Result<NoiseEstimates> {
        let c = self.denoise(x, sigma, Some(cond))?;
        let u = self.denoise(x, sigma, None)?;
        Ok(NoiseEstimates { cond: self.noise_from(x, &c, sigma), uncond: self.noise_from(x, &u, sigma) })
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained_steps == 0 {
            return Err(Error::Untrained("denoiser"));
        }
        Ok(())
    }

    /// Euler reverse process for one batch, starting from `σ_max·ε`.
    fn reverse(&self, sched: &NoiseSchedule, cond: Option<&[f64]>, w: f32, rows: usize, rng: &mut Rng) -> Result<Vec<f32>> {
        let d = self.data_dim();
        let mut x = vec![0.0f32; rows * d];
        fill_normal(rng, &mut x);
        let top = sched.sigma(sched.steps()) as f32;
        x.iter_mut().for_each(|v| *v *= top);
        let mut x = Matrix::from_vec(rows, d, x)?;
        for t in (1..=sched.steps()).rev() {
            let (sigma, next) = (sched.sigma(t), sched.sigma(t - 1));
            let eps = match cond {
                Some(c) => guided_noise(&self.noise_estimates(&x, sigma, c)?, w),
                None => self.uncond_noise(&x, sigma)?,
            };
            let step = (next - sigma) as f32;
            for (v, &e) in x.as_mut_slice().iter_mut().zip(eps.as_slice()) {
                *v += step * e;
            }
        }
        x.ensure_finite("generated sample")?;
        Ok(x.into_vec())
    }

    /// Normalized samples. With `cond = None` only the unconditional branch
    /// runs; otherwise `cond` holds one raw weight per output row. Batch `b`
    /// draws its initial noise from stream `b` of `seed`.
    pub fn sample_normalized(
        &self,
        cond: Option<&[f64]>,
        count: usize,
        guidance: f64,
        sampler_steps: usize,
        seed: u64,
    ) -> Result<Vec<f32>> {
        self.ensure_trained()?;
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if let Some(c) = cond {
            if c.len() != count {
                return Err(Error::shape(format!("{count} conditions"), format!("{}", c.len())));
            }
        }
        let sched = NoiseSchedule::new(sampler_steps, self.schedule.sigma_min, self.schedule.sigma_max, self.schedule.rho)?;
        let w = guidance as f32;
        let d = self.data_dim();
        let batches = count.div_ceil(SAMPLE_BATCH);
        let run = |b: usize| -> Result<Vec<f32>> {
            let lo = b * SAMPLE_BATCH;
            let hi = (lo + SAMPLE_BATCH).min(count);
            let mut rng = rng::stream(seed, b as u64);
            self.reverse(&sched, cond.map(|c| &c[lo..hi]), w, hi - lo, &mut rng)
        };
        #[cfg(feature = "std")]
        let parts: Vec<Result<Vec<f32>>> = {
            use rayon::prelude::*;
            (0..batches).into_par_iter().map(run).collect()
        };
        #[cfg(not(feature = "std"))]
        let parts: Vec<Result<Vec<f32>>> = (0..batches).map(run).collect();
        let mut out = Vec::with_capacity(count * d);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Guided samples in data units, one condition per row.
    pub fn guided_sample(&self, cond: &[f64], guidance: f64, sampler_steps: usize, seed: u64) -> Result<TransitionDataset> {
        let rows = self.sample_normalized(Some(cond), cond.len(), guidance, sampler_steps, seed)?;
        self.denormalize(&rows)
    }

    /// Unconditional samples in data units.
    pub fn sample_unconditional(&self, count: usize, sampler_steps: usize, seed: u64) -> Result<TransitionDataset> {
        let rows = self.sample_normalized(None, count, 0.0, sampler_steps, seed)?;
        self.denormalize(&rows)
    }
}

/// Trains a denoiser on `src`, conditioning each row on its weight in
/// `scores`.
pub fn train_denoiser(
    src: &TransitionDataset,
    scores: &ScoreTable,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<(DenoiserModel, Vec<TrainLog>)> {
    cfg.validate()?;
    src.ensure_nonempty("source dataset")?;
    scores.ensure_matches(src)?;
    let schedule = cfg.schedule()?;
    let (mean, std) = generative_stats(src)?;
    let cond_mean = crate::stats::mean(&scores.weight);
    let cond_var = scores.weight.iter().map(|w| (w - cond_mean) * (w - cond_mean)).sum::<f64>() / scores.len() as f64;
    let cond_std = if libm::sqrt(cond_var) < crate::dataset::STD_GUARD { 1.0 } else { libm::sqrt(cond_var) };

    let d = 2 * src.state_dim() + src.action_dim() + 1;
    let mut sizes = vec![d + EXTRA_INPUTS];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(d);
    let net = Mlp::new(&sizes, Activation::Relu, &mut rng::stream(seed, 0))?;
    let mut model = DenoiserModel {
        state_dim: src.state_dim(),
        action_dim: src.action_dim(),
        net,
        schedule,
        mean,
        std,
        cond_mean,
        cond_std,
        trained_steps: 0,
    };
    let data = model.normalize(src)?;

    let mut order: Vec<usize> = (0..src.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(seed, 1));
    let n_hold = if src.len() >= 2 { ((src.len() as f64 * cfg.holdout_frac) as usize).clamp(1, src.len() - 1) } else { 0 };
    let (holdout, train) = order.split_at(n_hold);
    let train = if train.is_empty() { holdout } else { train };

    let mut batch_rng = rng::stream(seed, 2);
    let mut adam = AdamState::for_model(&model.net, cfg.lr);
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut since = 0usize;
    let initial = holdout_loss(&model, &data, holdout, &scores.weight, cfg, seed)?;
    log.push(TrainLog { step: 0, train_loss: f64::NAN, holdout_loss: initial });

    let mut x0 = Matrix::zeros(cfg.batch_size, d);
    let mut noisy = vec![0.0f32; d];
    let mut input = Matrix::zeros(cfg.batch_size, d + EXTRA_INPUTS);
    for step in 1..=cfg.train_steps {
        for r in 0..cfg.batch_size {
            let i = *train.choose(&mut batch_rng).expect("non-empty training split");
            let t = batch_rng.random_range(1..=model.schedule.steps());
            let sigma = model.schedule.sigma(t);
            let null = batch_rng.random::<f64>() < cfg.null_prob;
            fill_normal(&mut batch_rng, &mut noisy);
            let clean = &data[i * d..(i + 1) * d];
            x0.row_mut(r).copy_from_slice(clean);
            let (scale, s32) = (c_in(sigma), sigma as f32);
            let dst = input.row_mut(r);
            for j in 0..d {
                dst[j] = scale * (clean[j] + s32 * noisy[j]);
            }
            if null {
                dst[d] = 0.0;
                dst[d + 1] = MASK_NULL;
            } else {
                dst[d] = model.cond_feature(scores.weight[i]);
                dst[d + 1] = MASK_ON;
            }
            dst[d + 2] = sigma_feature(sigma);
        }
        let tape = model.net.forward_tape(&input)?;
        let (loss, grad) = denoising_loss(tape.output(), &x0)?;
        let back = model.net.backward(&tape, &grad)?;
        adam.update(&mut model.net, &back.grads)?;
        model.trained_steps = step;
        running += loss;
        since += 1;
        if step % cfg.log_every == 0 || step == cfg.train_steps {
            let hl = holdout_loss(&model, &data, holdout, &scores.weight, cfg, seed)?;
            log.push(TrainLog { step, train_loss: running / since as f64, holdout_loss: hl });
            running = 0.0;
            since = 0;
        }
    }
    Ok((model, log))
}

/// Denoising loss on the hold-out rows with a fixed draw of levels, noise and
/// masks, so values are comparable across training.
fn holdout_loss(model: &DenoiserModel, data: &[f32], rows: &[usize], weights: &[f64], cfg: &DiffusionConfig, seed: u64) -> Result<f64> {
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    let d = model.data_dim();
    let mut rng = rng::stream(seed, 3);
    let mut total = 0.0;
    let mut noise = vec![0.0f32; d];
    for chunk in rows.chunks(1024) {
        let mut input = Matrix::zeros(chunk.len(), d + EXTRA_INPUTS);
        let mut clean = Matrix::zeros(chunk.len(), d);
        for (r, &i) in chunk.iter().enumerate() {
            let t = rng.random_range(1..=model.schedule.steps());
            let sigma = model.schedule.sigma(t);
            let null = rng.random::<f64>() < cfg.null_prob;
            fill_normal(&mut rng, &mut noise);
            let x = &data[i * d..(i + 1) * d];
            clean.row_mut(r).copy_from_slice(x);
            let (scale, s32) = (c_in(sigma), sigma as f32);
            let dst = input.row_mut(r);
            for j in 0..d {
                dst[j] = scale * (x[j] + s32 * noise[j]);
            }
            if null {
                dst[d + 1] = MASK_NULL;
            } else {
                dst[d] = model.cond_feature(weights[i]);
                dst[d + 1] = MASK_ON;
            }
            dst[d + 2] = sigma_feature(sigma);
        }
        let pred = model.net.forward(&input)?;
        let (loss, _) = denoising_loss(&pred, &clean)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Draws conditions as percentiles of a fixed weight distribution.
#[derive(Debug, Clone)]
pub struct ConditionSampler {
    sorted: Vec<f64>,
    kappa: f64,
}

impl ConditionSampler {
    pub fn new(scores: &ScoreTable, kappa: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("score table"));
        }
        if !(0.0..100.0).contains(&kappa) {
            return Err(Error::invalid(format!("kappa {kappa} outside [0, 100)")));
        }
        Ok(ConditionSampler { sorted: sorted_copy(&scores.weight), kappa })
    }

    /// `χ ~ U[κ, 100]`, returns the `χ`-th percentile of the weights.
    pub fn draw(&self, rng: &mut Rng) -> f64 {
        let chi = self.kappa + rng.random::<f64>() * (100.0 - self.kappa);
        percentile_sorted(&self.sorted, chi).expect("non-empty, in range")
    }
}

/// One condition drawn from `scores` (see [`ConditionSampler::draw`]).
pub fn sample_condition(scores: &ScoreTable, kappa: f64, rng: &mut Rng) -> Result<f64> {
    Ok(ConditionSampler::new(scores, kappa)?.draw(rng))
}

/// Result of augmenting a real source dataset with generated rows.
#[derive(Debug, Clone)]
pub struct Augmented {
    /// Real rows followed by generated rows.
    pub dataset: TransitionDataset,
    /// Scores for `dataset`; generated rows are re-scored against the real
    /// source/target indexes and shifted by the real `rho_min`.
    pub scores: ScoreTable,
    /// Conditioning weight used for each generated row.
    pub conditions: Vec<f64>,
}

/// Generates `cfg.count` guided rows with per-row conditions drawn from the
/// top of the real score distribution and appends them to `src`.
pub fn augment_source(
    src: &TransitionDataset,
    tar: &TransitionDataset,
    scores: &ScoreTable,
    model: &DenoiserModel,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Augmented> {
    cfg.validate()?;
    scores.ensure_matches(src)?;
    let sampler = ConditionSampler::new(scores, cfg.kappa)?;
    let mut cond_rng = rng::stream(seed, 0);
    let conditions: Vec<f64> = (0..cfg.count).map(|_| sampler.draw(&mut cond_rng)).collect();
    let generated = model.guided_sample(&conditions, cfg.guidance, cfg.sampler_steps, rng::derive_seed(seed, 1))?;
    let scorer = GapScorer::new(src, tar, scores.k)?;
    let (rho, floored) = scorer.external_rho(&generated)?;
    let dataset = concat(src, &generated)?;
    let scores = scores.extended(&rho, floored, &dataset)?;
    Ok(Augmented { dataset, scores, conditions })
}
