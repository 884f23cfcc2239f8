//! Conditional VAE of the target behavior policy.
//!
//! The encoder maps `s ⊕ a` to a diagonal Gaussian over `z` (log-variance
//! clamped to `[−4, 4]`), the decoder maps `s ⊕ z` to the mean of
//! `N(a; dec(s, z), σ_dec² I)`. States are z-normalized with statistics of the
//! training data; actions are used raw.
//!
//! [`CvaeModel::log_prob`] is the importance-weighted bound
//! `ln (1/L) Σ_l N(a; dec(s, z_l), σ²)` with `z_l ~ N(0, I)`.

use alloc::{format, vec, vec::Vec};

use rand::seq::IndexedRandom;

use crate::dataset::TransitionDataset;
use crate::error::{Error, Result};
use crate::rng::{self, fill_normal, Rng};
use crate::tensor::{Activation, AdamState, Matrix, Mlp, ParamGrads};

pub const LOGVAR_MIN: f32 = -4.0;
pub const LOGVAR_MAX: f32 = 4.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeConfig {
    pub hidden: Vec<usize>,
    /// `None` uses `min(2 · action_dim, 8)`.
    pub latent_dim: Option<usize>,
    pub sigma_dec: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub holdout_frac: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            hidden: vec![256, 256],
            latent_dim: None,
            sigma_dec: 0.1,
            train_steps: 20_000,
            batch_size: 256,
            lr: 3e-4,
            holdout_frac: 0.05,
        }
    }
}

pub fn default_latent_dim(action_dim: usize) -> usize {
    (2 * action_dim).clamp(1, 8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub sigma_dec: f64,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub trained_steps: usize,
}

/// Hold-out ELBO before and after training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeReport {
    pub initial_elbo: f64,
    pub final_elbo: f64,
}

/// `KL(N(μ, e^lv) ‖ N(0, I))` for one row.
pub fn kl_standard_normal(mu: &[f32], logvar: &[f32]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + libm::exp(lv) - 1.0 - lv)
        })
        .sum()
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(v.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

impl CvaeModel {
    pub fn validate(&self) -> Result<()> {
        let (s, a, l) = (self.state_dim, self.action_dim, self.latent_dim);
        if self.encoder.input_dim() != s + a || self.encoder.output_dim() != 2 * l {
            return Err(Error::shape(
                format!("encoder {} -> {}", s + a, 2 * l),
                format!("{} -> {}", self.encoder.input_dim(), self.encoder.output_dim()),
            ));
        }
        if self.decoder.input_dim() != s + l || self.decoder.output_dim() != a {
            return Err(Error::shape(
                format!("decoder {} -> {}", s + l, a),
                format!("{} -> {}", self.decoder.input_dim(), self.decoder.output_dim()),
            ));
        }
        if self.state_mean.len() != s || self.state_std.len() != s || self.state_std.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("state normalization does not match the state dimension"));
        }
        if !(self.sigma_dec > 0.0 && self.sigma_dec.is_finite()) {
            return Err(Error::invalid("decoder scale must be positive"));
        }
        Ok(())
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained_steps == 0 {
            return Err(Error::Untrained("behavior model"));
        }
        Ok(())
    }

    fn check_rows(&self, states: &[f32], actions: &[f32]) -> Result<usize> {
        if !states.len().is_multiple_of(self.state_dim.max(1)) || !actions.len().is_multiple_of(self.action_dim.max(1)) {
            return Err(Error::shape("whole rows", format!("{} state and {} action values", states.len(), actions.len())));
        }
        let n = states.len() / self.state_dim.max(1);
        if actions.len() != n * self.action_dim {
            return Err(Error::shape(format!("{} action values", n * self.action_dim), format!("{}", actions.len())));
        }
        Ok(n)
    }

    /// Writes the normalized state of row `r` into `dst`.
    fn put_state(&self, state: &[f32], dst: &mut [f32]) {
        for (((o, &v), m), s) in dst.iter_mut().zip(state).zip(&self.state_mean).zip(&self.state_std) {
            *o = ((v as f64 - m) / s) as f32;
        }
    }

    fn encoder_input(&self, states: &[f32], actions: &[f32], rows: &[usize]) -> Matrix {
        let (s, a) = (self.state_dim, self.action_dim);
        let mut m = Matrix::zeros(rows.len(), s + a);
        for (r, &i) in rows.iter().enumerate() {
            let dst = m.row_mut(r);
            self.put_state(&states[i * s..(i + 1) * s], &mut dst[..s]);
            dst[s..].copy_from_slice(&actions[i * a..(i + 1) * a]);
        }
        m
    }

    /// `(μ, clamped log-variance)` of row `r` of an encoder output.
    fn split_posterior<'a>(&self, out: &'a Matrix, r: usize) -> (&'a [f32], Vec<f32>) {
        let l = self.latent_dim;
        let row = out.row(r);
        (&row[..l], row[l..].iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect())
    }

    fn gaussian_log_density(&self, a: &[f32], mean: &[f32]) -> f64 {
        let var = self.sigma_dec * self.sigma_dec;
        let sq: f64 = a.iter().zip(mean).map(|(&x, &m)| (x as f64 - m as f64) * (x as f64 - m as f64)).sum();
        -0.5 * sq / var - self.action_dim as f64 * (libm::log(self.sigma_dec) + 0.5 * LN_2PI)
    }

    /// Decoder means for `latents.len() / latent_dim` rows; row `j` uses the
    /// state of row `j / per_state`.
    fn decode(&self, states: &[f32], latents: &[f32], per_state: usize) -> Result<Matrix> {
        let (s, l) = (self.state_dim, self.latent_dim);
        let rows = latents.len() / l;
        let mut m = Matrix::zeros(rows, s + l);
        for j in 0..rows {
            let i = j / per_state;
            let dst = m.row_mut(j);
            self.put_state(&states[i * s..(i + 1) * s], &mut dst[..s]);
            dst[s..].copy_from_slice(&latents[j * l..(j + 1) * l]);
        }
        self.decoder.forward(&m)
    }

    /// Mean negative ELBO of `rows` with reparameterization noise `eps`
    /// (`rows.len() × latent_dim`), and its encoder and decoder gradients.
    pub fn batch_loss(&self, states: &[f32], actions: &[f32], rows: &[usize], eps: &[f32]) -> Result<(f64, ParamGrads, ParamGrads)> {
        let (s, a, l) = (self.state_dim, self.action_dim, self.latent_dim);
        let b = rows.len();
        if eps.len() != b * l {
            return Err(Error::shape(format!("{} noise values", b * l), format!("{}", eps.len())));
        }
        let var = self.sigma_dec * self.sigma_dec;
        let enc_tape = self.encoder.forward_tape(&self.encoder_input(states, actions, rows))?;
        let post = enc_tape.output();
        let mut dec_in = Matrix::zeros(b, s + l);
        let mut lv_all = vec![0.0f32; b * l];
        let mut loss = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let (mu, lv) = self.split_posterior(post, r);
            loss += kl_standard_normal(mu, &lv);
            let dst = dec_in.row_mut(r);
            self.put_state(&states[i * s..(i + 1) * s], &mut dst[..s]);
            for j in 0..l {
                dst[s + j] = mu[j] + libm::expf(0.5 * lv[j]) * eps[r * l + j];
            }
            lv_all[r * l..(r + 1) * l].copy_from_slice(&lv);
        }
        let dec_tape = self.decoder.forward_tape(&dec_in)?;
        let scale = 1.0 / b as f64;
        let mut g_dec = Matrix::zeros(b, a);
        for (r, &i) in rows.iter().enumerate() {
            let target = &actions[i * a..(i + 1) * a];
            loss -= self.gaussian_log_density(target, dec_tape.output().row(r));
            for ((g, &m), &x) in g_dec.row_mut(r).iter_mut().zip(dec_tape.output().row(r)).zip(target) {
                *g = ((m as f64 - x as f64) / var * scale) as f32;
            }
        }
        let dec_back = self.decoder.backward(&dec_tape, &g_dec)?;
        let mut g_enc = Matrix::zeros(b, 2 * l);
        for r in 0..b {
            let gz = &dec_back.input_grad.row(r)[s..];
            let raw = post.row(r);
            let dst = g_enc.row_mut(r);
            for j in 0..l {
                let (mu, lv) = (raw[j] as f64, lv_all[r * l + j] as f64);
                dst[j] = (gz[j] as f64 + mu * scale) as f32;
                let inside = raw[l + j] > LOGVAR_MIN && raw[l + j] < LOGVAR_MAX;
                dst[l + j] = if inside {
                    let sd = libm::exp(0.5 * lv);
                    (gz[j] as f64 * 0.5 * sd * eps[r * l + j] as f64 + 0.5 * (libm::exp(lv) - 1.0) * scale) as f32
                } else {
                    0.0
                };
            }
        }
        let enc_back = self.encoder.backward(&enc_tape, &g_enc)?;
        Ok((loss * scale, enc_back.grads, dec_back.grads))
    }

    /// Importance-weighted lower bound on `ln p(a | s)` per row with `samples`
    /// prior draws, plus its gradient with respect to each action.
    pub fn log_prob_and_grad(&self, states: &[f32], actions: &[f32], samples: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f32>)> {
        self.ensure_trained()?;
        let n = self.check_rows(states, actions)?;
        if samples == 0 {
            return Err(Error::invalid("need at least one latent sample"));
        }
        let (a_dim, l) = (self.action_dim, self.latent_dim);
        let mut z = vec![0.0f32; n * samples * l];
        fill_normal(rng, &mut z);
        let dec = self.decode(states, &z, samples)?;
        let var = self.sigma_dec * self.sigma_dec;
        let mut values = Vec::with_capacity(n);
        let mut grad = vec![0.0f32; n * a_dim];
        let mut logs = vec![0.0f64; samples];
        for i in 0..n {
            let a = &actions[i * a_dim..(i + 1) * a_dim];
            for (k, lg) in logs.iter_mut().enumerate() {
                *lg = self.gaussian_log_density(a, dec.row(i * samples + k));
            }
            let lse = logsumexp(&logs);
            values.push(lse - libm::log(samples as f64));
            let g = &mut grad[i * a_dim..(i + 1) * a_dim];
            let mut acc = vec![0.0f64; a_dim];
            for (k, lg) in logs.iter().enumerate() {
                let wk = libm::exp(lg - lse);
                for ((s, &m), &x) in acc.iter_mut().zip(dec.row(i * samples + k)).zip(a) {
                    *s += wk * (m as f64 - x as f64) / var;
                }
            }
            for (o, v) in g.iter_mut().zip(acc) {
                *o = v as f32;
            }
        }
        Ok((values, grad))
    }

    /// Importance-weighted bound with prior proposal, deterministic in `seed`.
    pub fn log_prob(&self, states: &[f32], actions: &[f32], samples: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(self.log_prob_and_grad(states, actions, samples, &mut rng::rng_from_seed(seed))?.0)
    }

    /// Importance-weighted estimate with the encoder as proposal:
    /// `ln (1/K) Σ_k p(a|s,z_k) p(z_k) / q(z_k|s,a)`.
    pub fn iw_log_likelihood(&self, states: &[f32], actions: &[f32], samples: usize, seed: u64) -> Result<Vec<f64>> {
        self.ensure_trained()?;
        let n = self.check_rows(states, actions)?;
        let l = self.latent_dim;
        let all: Vec<usize> = (0..n).collect();
        let post = self.encoder.forward(&self.encoder_input(states, actions, &all))?;
        let mut rng = rng::rng_from_seed(seed);
        let mut eps = vec![0.0f32; n * samples * l];
        fill_normal(&mut rng, &mut eps);
        let mut z = vec![0.0f32; n * samples * l];
        let mut log_ratio = vec![0.0f64; n * samples];
        for i in 0..n {
            let (mu, lv) = self.split_posterior(&post, i);
            for k in 0..samples {
                let off = (i * samples + k) * l;
                let mut lr = 0.0;
                for j in 0..l {
                    let sd = libm::expf(0.5 * lv[j]);
                    let e = eps[off + j];
                    let zj = mu[j] + sd * e;
                    z[off + j] = zj;
                    // ln p(z) − ln q(z): the ln 2π terms cancel.
                    lr += -0.5 * (zj as f64) * (zj as f64) + 0.5 * (e as f64) * (e as f64) + 0.5 * lv[j] as f64;
                }
                log_ratio[i * samples + k] = lr;
            }
        }
        let dec = self.decode(states, &z, samples)?;
        let a_dim = self.action_dim;
        let mut out = Vec::with_capacity(n);
        let mut terms = vec![0.0; samples];
        for i in 0..n {
            let a = &actions[i * a_dim..(i + 1) * a_dim];
            for (k, t) in terms.iter_mut().enumerate() {
                *t = self.gaussian_log_density(a, dec.row(i * samples + k)) + log_ratio[i * samples + k];
            }
            out.push(logsumexp(&terms) - libm::log(samples as f64));
        }
        Ok(out)
    }

    /// Monte-Carlo ELBO per row with `samples` encoder draws.
    pub fn elbo(&self, states: &[f32], actions: &[f32], samples: usize, seed: u64) -> Result<Vec<f64>> {
        let n = self.check_rows(states, actions)?;
        let all: Vec<usize> = (0..n).collect();
        self.elbo_rows(states, actions, &all, samples, &mut rng::rng_from_seed(seed))
    }

    fn elbo_rows(&self, states: &[f32], actions: &[f32], rows: &[usize], samples: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let l = self.latent_dim;
        let post = self.encoder.forward(&self.encoder_input(states, actions, rows))?;
        let mut z = vec![0.0f32; rows.len() * samples * l];
        fill_normal(rng, &mut z);
        let mut sub_states = Vec::with_capacity(rows.len() * self.state_dim);
        let mut kl = Vec::with_capacity(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            sub_states.extend_from_slice(&states[i * self.state_dim..(i + 1) * self.state_dim]);
            let (mu, lv) = self.split_posterior(&post, r);
            kl.push(kl_standard_normal(mu, &lv));
            for k in 0..samples {
                let off = (r * samples + k) * l;
                for j in 0..l {
                    z[off + j] = mu[j] + libm::expf(0.5 * lv[j]) * z[off + j];
                }
            }
        }
        let dec = self.decode(&sub_states, &z, samples)?;
        let a_dim = self.action_dim;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let a = &actions[i * a_dim..(i + 1) * a_dim];
                let rec: f64 = (0..samples).map(|k| self.gaussian_log_density(a, dec.row(r * samples + k))).sum::<f64>() / samples as f64;
                rec - kl[r]
            })
            .collect())
    }
}

fn state_moments(states: &[f32], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (states.len() / dim.max(1)).max(1) as f64;
    let mut mean = vec![0.0; dim];
    for row in states.chunks_exact(dim.max(1)) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / n;
        }
    }
    let mut std = vec![0.0; dim];
    for row in states.chunks_exact(dim.max(1)) {
        for ((s, &v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m) * (v as f64 - m) / n;
        }
    }
    for s in std.iter_mut() {
        *s = libm::sqrt(*s);
        if *s < crate::dataset::STD_GUARD {
            *s = 1.0;
        }
    }
    (mean, std)
}

/// Fits the behavior model to the `(s, a)` pairs of `tar`.
pub fn train_cvae(tar: &TransitionDataset, cfg: &CvaeConfig, seed: u64) -> Result<(CvaeModel, CvaeReport)> {
    tar.ensure_nonempty("behavior dataset")?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.sigma_dec > 0.0) {
        return Err(Error::invalid("batch size, learning rate and decoder scale must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.holdout_frac) {
        return Err(Error::invalid(format!("hold-out fraction {} outside [0, 1)", cfg.holdout_frac)));
    }
    let (s, a) = (tar.state_dim(), tar.action_dim());
    if a == 0 {
        return Err(Error::invalid("behavior model needs at least one action dimension"));
    }
    let l = cfg.latent_dim.unwrap_or_else(|| default_latent_dim(a));
    if l == 0 {
        return Err(Error::invalid("latent dimension must be positive"));
    }
    let mut states = Vec::with_capacity(tar.len() * s);
    let mut actions = Vec::with_capacity(tar.len() * a);
    for i in 0..tar.len() {
        let t = tar.get(i);
        states.extend_from_slice(t.state);
        actions.extend_from_slice(t.action);
    }
    let (state_mean, state_std) = state_moments(&states, s);
    let sizes = |input: usize, output: usize| {
        let mut v = vec![input];
        v.extend_from_slice(&cfg.hidden);
        v.push(output);
        v
    };
    let mut init = rng::stream(seed, 0);
    let mut model = CvaeModel {
        state_dim: s,
        action_dim: a,
        latent_dim: l,
        sigma_dec: cfg.sigma_dec,
        encoder: Mlp::new(&sizes(s + a, 2 * l), Activation::Relu, &mut init)?,
        decoder: Mlp::new(&sizes(s + l, a), Activation::Relu, &mut init)?,
        state_mean,
        state_std,
        trained_steps: 0,
    };

    let mut order: Vec<usize> = (0..tar.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(seed, 1));
    let n_hold = if tar.len() >= 2 { ((tar.len() as f64 * cfg.holdout_frac) as usize).clamp(1, tar.len() - 1) } else { 0 };
    let (holdout, train) = order.split_at(n_hold);
    let train = if train.is_empty() { holdout } else { train };
    let eval_rows = if holdout.is_empty() { train } else { holdout };
    let eval = |m: &CvaeModel| -> Result<f64> {
        let v = m.elbo_rows(&states, &actions, eval_rows, 4, &mut rng::stream(seed, 3))?;
        Ok(crate::stats::mean(&v))
    };
    let initial_elbo = eval(&model)?;

    let mut enc_opt = AdamState::for_model(&model.encoder, cfg.lr);
    let mut dec_opt = AdamState::for_model(&model.decoder, cfg.lr);
    let mut rng = rng::stream(seed, 2);
    let b = cfg.batch_size;
    let mut rows = vec![0usize; b];
    let mut eps = vec![0.0f32; b * l];
    for step in 1..=cfg.train_steps {
        for r in rows.iter_mut() {
            *r = *train.choose(&mut rng).expect("non-empty training split");
        }
        fill_normal(&mut rng, &mut eps);
        let (_, enc_grads, dec_grads) = model.batch_loss(&states, &actions, &rows, &eps)?;
        dec_opt.update(&mut model.decoder, &dec_grads)?;
        enc_opt.update(&mut model.encoder, &enc_grads)?;
        model.trained_steps = step;
    }
    let final_elbo = eval(&model)?;
    Ok((model, CvaeReport { initial_elbo, final_elbo }))
}
