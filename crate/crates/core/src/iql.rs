//! Implicit Q-learning with score-weighted source rows.
//!
//! Every update draws `batch_tar` target rows and `batch_src` source rows
//! (independent streams). Each loss is the target-row mean plus the
//! `ω`-weighted source-row mean, with `ω_i = w_i · 1(w_i ≥ w_ξ)` (or 1 when
//! pooling without scores). So `ω ≡ 0` reproduces target-only IQL, `ω ≡ 1`
//! reproduces pooled IQL exactly, and a gated row never touches a gradient.
//!
//! Per step, in order:
//! - `V` fits the `τ`-expectile of `min(Q̄₁, Q̄₂)(s, a)` (target critics);
//! - the policy maximizes `c·min(e^{β(Q̄ − V)}, clip)·ln π(a|s)` plus
//!   `λ·c·ln π̂ᵇ(μ(s)|s)` under the behavior model;
//! - both critics regress onto `r + γ(1 − d)V(s')`;
//! - target critics move toward the online ones by Polyak averaging.

use alloc::{format, vec, vec::Vec};

use rand::seq::IndexedRandom;

use crate::cvae::CvaeModel;
use crate::dataset::TransitionDataset;
use crate::env;
use crate::error::{Error, Result};
use crate::knn::{selection_weights, ScoreTable};
use crate::rng::{self, normal_f64, Rng};
use crate::tensor::{Activation, AdamState, Matrix, Mlp};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Asymmetric squared loss `|τ − 1(u < 0)|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqlConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub expectile: f64,
    pub beta: f64,
    pub adv_clip: f64,
    pub polyak: f32,
    pub lr: f32,
    pub batch_tar: usize,
    pub batch_src: usize,
    /// Weight of the behavior-model regularizer.
    pub lambda: f64,
    /// Selection ratio in percent: source rows below the `ξ`-quantile of
    /// the weights are gated out.
    pub xi: f64,
    /// Latent samples per behavior log-probability.
    pub bc_samples: usize,
    pub log_std_min: f32,
    pub log_std_max: f32,
    pub log_every: usize,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            hidden: vec![256, 256],
            gamma: 0.99,
            expectile: 0.7,
            beta: 3.0,
            adv_clip: 100.0,
            polyak: 5e-3,
            lr: 3e-4,
            batch_tar: 128,
            batch_src: 128,
            lambda: 0.1,
            xi: 50.0,
            bc_samples: 8,
            log_std_min: -20.0,
            log_std_max: 2.0,
            log_every: 1000,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::invalid(format!("expectile {} outside (0, 1)", self.expectile)));
        }
        if !(self.polyak > 0.0 && self.polyak < 1.0) {
            return Err(Error::invalid(format!("target update coefficient {} outside (0, 1)", self.polyak)));
        }
        if !(self.lr > 0.0) || !(self.adv_clip > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("learning rate and advantage clip must be positive, beta finite"));
        }
        if self.batch_tar == 0 {
            return Err(Error::invalid("target batch must be non-empty"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("regularization weight {} must be non-negative", self.lambda)));
        }
        if !(0.0..100.0).contains(&self.xi) {
            return Err(Error::invalid(format!("selection ratio {} outside [0, 100)", self.xi)));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::invalid("log-std bounds must be increasing"));
        }
        if self.log_every == 0 || self.bc_samples == 0 {
            return Err(Error::invalid("log interval and behavior samples must be positive"));
        }
        Ok(())
    }
}

/// Networks of one learner. States are z-normalized with target statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub state_dim: usize,
    pub action_dim: usize,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub v: Mlp,
    /// Maps a state to the pre-`tanh` action mean.
    pub actor: Mlp,
    /// Unclamped log standard deviation per action dimension.
    pub log_std: Vec<f32>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub config: IqlConfig,
    pub steps: usize,
}

impl PolicyBundle {
    pub fn new(state_dim: usize, action_dim: usize, state_mean: Vec<f64>, state_std: Vec<f64>, cfg: &IqlConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::invalid("state and action dimensions must be positive"));
        }
        if state_mean.len() != state_dim || state_std.len() != state_dim {
            return Err(Error::shape(format!("{state_dim} state statistics"), format!("{}", state_mean.len())));
        }
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(&cfg.hidden);
            v.push(output);
            v
        };
        let mut init = rng::stream(seed, 0);
        let q1 = Mlp::new(&sizes(state_dim + action_dim, 1), Activation::Relu, &mut init)?;
        let q2 = Mlp::new(&sizes(state_dim + action_dim, 1), Activation::Relu, &mut init)?;
        let v = Mlp::new(&sizes(state_dim, 1), Activation::Relu, &mut init)?;
        let actor = Mlp::new(&sizes(state_dim, action_dim), Activation::Relu, &mut init)?;
        Ok(PolicyBundle {
            state_dim,
            action_dim,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            v,
            actor,
            log_std: vec![0.0; action_dim],
            state_mean,
            state_std,
            config: cfg.clone(),
            steps: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (s, a) = (self.state_dim, self.action_dim);
        let check = |m: &Mlp, i: usize, o: usize, name: &str| -> Result<()> {
            if m.input_dim() != i || m.output_dim() != o {
                return Err(Error::shape(format!("{name} {i} -> {o}"), format!("{} -> {}", m.input_dim(), m.output_dim())));
            }
            Ok(())
        };
        check(&self.q1, s + a, 1, "q1")?;
        check(&self.q2, s + a, 1, "q2")?;
        check(&self.q1_target, s + a, 1, "q1 target")?;
        check(&self.q2_target, s + a, 1, "q2 target")?;
        check(&self.v, s, 1, "v")?;
        check(&self.actor, s, a, "actor")?;
        if self.log_std.len() != a || self.state_mean.len() != s || self.state_std.len() != s {
            return Err(Error::shape(format!("{a} log-stds and {s} state statistics"), "other lengths"));
        }
        if self.state_std.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("state scales must be positive"));
        }
        Ok(())
    }

    /// Log standard deviations after clamping.
    pub fn effective_log_std(&self) -> Vec<f32> {
        self.log_std.iter().map(|v| v.clamp(self.config.log_std_min, self.config.log_std_max)).collect()
    }

    fn normalize_states(&self, states: &[f32]) -> Result<Matrix> {
        let s = self.state_dim;
        if !states.len().is_multiple_of(s) {
            return Err(Error::shape(format!("multiple of {s} state values"), format!("{}", states.len())));
        }
        let n = states.len() / s;
        Ok(Matrix::from_fn(n, s, |r, c| ((states[r * s + c] as f64 - self.state_mean[c]) / self.state_std[c]) as f32))
    }

    /// Deterministic action `tanh(actor(s))` per row.
    pub fn mean_action(&self, states: &[f32]) -> Result<Vec<f32>> {
        let out = self.actor.forward(&self.normalize_states(states)?)?;
        Ok(out.as_slice().iter().map(|&u| libm::tanhf(u)).collect())
    }

    /// One Gaussian draw around the mean action per row.
    pub fn sample_action(&self, states: &[f32], rng: &mut Rng) -> Result<Vec<f32>> {
        let mean = self.mean_action(states)?;
        let ls = self.effective_log_std();
        let out: Vec<f32> =
            mean.iter().enumerate().map(|(i, &m)| m + libm::expf(ls[i % self.action_dim]) * normal_f64(rng) as f32).collect();
        crate::error::ensure_finite(&out, "sampled action")?;
        Ok(out)
    }

    /// `min(Q₁, Q₂)` of the online critics.
    pub fn q_value(&self, states: &[f32], actions: &[f32]) -> Result<Vec<f32>> {
        let x = self.state_action(&self.normalize_states(states)?, actions)?;
        let (a, b) = (self.q1.forward(&x)?, self.q2.forward(&x)?);
        Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn value(&self, states: &[f32]) -> Result<Vec<f32>> {
        Ok(self.v.forward(&self.normalize_states(states)?)?.into_vec())
    }

    fn state_action(&self, s: &Matrix, actions: &[f32]) -> Result<Matrix> {
        let a = self.action_dim;
        if actions.len() != s.rows() * a {
            return Err(Error::shape(format!("{} action values", s.rows() * a), format!("{}", actions.len())));
        }
        let sd = self.state_dim;
        Ok(Matrix::from_fn(s.rows(), sd + a, |r, c| if c < sd { s.get(r, c) } else { actions[r * a + c - sd] }))
    }
}

/// Evaluates the bundle's mean action in the point-mass environments.
pub struct MeanActionPolicy<'a>(&'a PolicyBundle);

impl<'a> MeanActionPolicy<'a> {
    pub fn new(bundle: &'a PolicyBundle) -> Result<Self> {
        if bundle.state_dim != env::STATE_DIM || bundle.action_dim != env::ACTION_DIM {
            return Err(Error::shape(
                format!("state_dim {}, action_dim {}", env::STATE_DIM, env::ACTION_DIM),
                format!("state_dim {}, action_dim {}", bundle.state_dim, bundle.action_dim),
            ));
        }
        Ok(MeanActionPolicy(bundle))
    }
}

impl env::Policy for MeanActionPolicy<'_> {
    fn act(&self, state: &env::State, _rng: &mut Rng) -> env::Action {
        let s: [f32; env::STATE_DIM] = core::array::from_fn(|i| state[i] as f32);
        match self.0.mean_action(&s) {
            Ok(a) => core::array::from_fn(|i| a[i] as f64),
            // Non-finite network output: the environment clamps, so a zero
            // action is the only safe fallback.
            Err(_) => [0.0; env::ACTION_DIM],
        }
    }
}

/// How source rows enter the updates.
#[derive(Debug, Clone)]
pub enum SourceRows<'a> {
    /// Target data only.
    None,
    /// Source rows with unit weight (naive mixing).
    Pooled(&'a TransitionDataset),
    /// Source rows weighted by `omega` (one entry per row).
    Weighted { data: &'a TransitionDataset, omega: Vec<f64> },
}

impl<'a> SourceRows<'a> {
    /// Gated weights from a score table aligned with `data`.
    pub fn from_scores(data: &'a TransitionDataset, scores: &ScoreTable, xi: f64) -> Result<Self> {
        scores.ensure_matches(data)?;
        Ok(SourceRows::Weighted { data, omega: selection_weights(scores, xi)? })
    }

    fn data(&self) -> Option<&'a TransitionDataset> {
        match self {
            SourceRows::None => None,
            SourceRows::Pooled(d) => Some(d),
            SourceRows::Weighted { data, .. } => Some(data),
        }
    }

    fn weight(&self, i: usize) -> f64 {
        match self {
            SourceRows::Weighted { omega, .. } => omega[i],
            _ => 1.0,
        }
    }

    /// `(mean ω, fraction with ω > 0)` over all source rows.
    pub fn selection_summary(&self) -> (f64, f64) {
        match self {
            SourceRows::None => (0.0, 0.0),
            SourceRows::Pooled(_) => (1.0, 1.0),
            SourceRows::Weighted { omega, .. } => {
                let n = omega.len().max(1) as f64;
                (omega.iter().sum::<f64>() / n, omega.iter().filter(|&&w| w > 0.0).count() as f64 / n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_v: f64,
    /// Mean of the two critic losses.
    pub loss_q: f64,
    pub loss_pi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_v: f64,
    pub loss_q: f64,
    pub loss_pi: f64,
    pub mean_omega: f64,
    pub frac_selected: f64,
    pub eval_return: Option<f64>,
    pub eval_ns: Option<f64>,
}

struct Batch {
    states: Vec<f32>,
    s: Matrix,
    sa: Matrix,
    actions: Vec<f32>,
    reward: Vec<f64>,
    not_done: Vec<f64>,
    next: Matrix,
    /// Row weight over its block size: target rows `1/n_tar`, source rows `ω/n_src`.
    scale: Vec<f64>,
    c: Vec<f64>,
}

pub struct Trainer<'a> {
    bundle: PolicyBundle,
    tar: &'a TransitionDataset,
    source: SourceRows<'a>,
    cvae: Option<&'a CvaeModel>,
    opt_q1: AdamState,
    opt_q2: AdamState,
    opt_v: AdamState,
    opt_actor: AdamState,
    opt_log_std: AdamState,
    tar_rng: Rng,
    src_rng: Rng,
    reg_rng: Rng,
}

fn state_moments(ds: &TransitionDataset) -> (Vec<f64>, Vec<f64>) {
    let s = ds.state_dim();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; s];
    for i in 0..ds.len() {
        for (m, &v) in mean.iter_mut().zip(ds.get(i).state) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; s];
    for i in 0..ds.len() {
        for ((acc, &v), m) in var.iter_mut().zip(ds.get(i).state).zip(&mean) {
            *acc += (v as f64 - m) * (v as f64 - m);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let sd = libm::sqrt(v / n);
            if sd < crate::dataset::STD_GUARD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

impl<'a> Trainer<'a> {
    pub fn new(
        tar: &'a TransitionDataset,
        source: SourceRows<'a>,
        cvae: Option<&'a CvaeModel>,
        cfg: &IqlConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        tar.ensure_nonempty("target dataset")?;
        if let Some(src) = source.data() {
            tar.ensure_same_layout(src)?;
            src.ensure_nonempty("source dataset")?;
            if cfg.batch_src == 0 {
                return Err(Error::invalid("source batch must be non-empty when source rows are used"));
            }
        }
        if let SourceRows::Weighted { data, omega } = &source {
            if omega.len() != data.len() {
                return Err(Error::shape(format!("{} source weights", data.len()), format!("{}", omega.len())));
            }
            if omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::invalid("source weights must be finite and non-negative"));
            }
        }
        if cfg.lambda > 0.0 {
            let model = cvae.ok_or_else(|| Error::invalid("behavior model required when lambda > 0"))?;
            model.validate()?;
            if model.state_dim != tar.state_dim() || model.action_dim != tar.action_dim() {
                return Err(Error::shape("behavior model matching the dataset layout", "different dimensions"));
            }
        }
        let (mean, std) = state_moments(tar);
        let bundle = PolicyBundle::new(tar.state_dim(), tar.action_dim(), mean, std, cfg, seed)?;
        Ok(Trainer {
            opt_q1: AdamState::for_model(&bundle.q1, cfg.lr),
            opt_q2: AdamState::for_model(&bundle.q2, cfg.lr),
            opt_v: AdamState::for_model(&bundle.v, cfg.lr),
            opt_actor: AdamState::for_model(&bundle.actor, cfg.lr),
            opt_log_std: AdamState::new(bundle.action_dim, cfg.lr),
            bundle,
            tar,
            source,
            cvae,
            tar_rng: rng::stream(seed, 1),
            src_rng: rng::stream(seed, 2),
            reg_rng: rng::stream(seed, 3),
        })
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> PolicyBundle {
        self.bundle
    }

    pub fn source(&self) -> &SourceRows<'a> {
        &self.source
    }

    fn draw_batch(&mut self) -> Result<Batch> {
        let cfg = &self.bundle.config;
        let mut rows: Vec<(&TransitionDataset, usize, f64)> = Vec::with_capacity(cfg.batch_tar + cfg.batch_src);
        let tar_idx: Vec<usize> = (0..self.tar.len()).collect();
        for _ in 0..cfg.batch_tar {
            rows.push((self.tar, *tar_idx.choose(&mut self.tar_rng).unwrap(), 1.0));
        }
        if let Some(src) = self.source.data() {
            let src_idx: Vec<usize> = (0..src.len()).collect();
            for _ in 0..cfg.batch_src {
                let i = *src_idx.choose(&mut self.src_rng).unwrap();
                rows.push((src, i, self.source.weight(i)));
            }
        }
        let (sd, ad) = (self.bundle.state_dim, self.bundle.action_dim);
        let n = rows.len();
        let mut states = Vec::with_capacity(n * sd);
        let mut next_raw = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        let mut reward = Vec::with_capacity(n);
        let mut not_done = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for &(ds, i, w) in &rows {
            let t = ds.get(i);
            states.extend_from_slice(t.state);
            next_raw.extend_from_slice(t.next_state);
            actions.extend_from_slice(t.action);
            reward.push(t.reward as f64);
            not_done.push(if t.terminal { 0.0 } else { 1.0 });
            c.push(w);
        }
        let s = self.bundle.normalize_states(&states)?;
        let sa = self.bundle.state_action(&s, &actions)?;
        let next = self.bundle.normalize_states(&next_raw)?;
        let (nt, ns) = (cfg.batch_tar as f64, cfg.batch_src.max(1) as f64);
        let scale = c.iter().enumerate().map(|(i, w)| if i < cfg.batch_tar { w / nt } else { w / ns }).collect();
        Ok(Batch { states, s, sa, actions, reward, not_done, next, scale, c })
    }

    /// One update of `V`, the policy, both critics and the target critics.
    pub fn step(&mut self) -> Result<StepLosses> {
        let batch = self.draw_batch()?;
        let loss_v = self.update_value(&batch)?;
        let loss_pi = self.update_policy(&batch)?;
        let loss_q = self.update_critics(&batch)?;
        let b = &mut self.bundle;
        let tau = b.config.polyak;
        b.q1_target.soft_update_from(&b.q1, tau)?;
        b.q2_target.soft_update_from(&b.q2, tau)?;
        b.steps += 1;
        Ok(StepLosses { loss_v, loss_q, loss_pi })
    }

    fn target_q(&self, batch: &Batch) -> Result<Vec<f64>> {
        let a = self.bundle.q1_target.forward(&batch.sa)?;
        let b = self.bundle.q2_target.forward(&batch.sa)?;
        Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x.min(*y) as f64).collect())
    }

    fn update_value(&mut self, batch: &Batch) -> Result<f64> {
        let tau = self.bundle.config.expectile;
        let q = self.target_q(batch)?;
        let tape = self.bundle.v.forward_tape(&batch.s)?;
        let mut loss = 0.0;
        let mut g = Matrix::zeros(q.len(), 1);
        for i in 0..q.len() {
            let u = q[i] - tape.output().get(i, 0) as f64;
            loss += batch.scale[i] * expectile_loss(u, tau);
            let w = if u < 0.0 { 1.0 - tau } else { tau };
            g.set(i, 0, (-2.0 * w * u * batch.scale[i]) as f32);
        }
        let back = self.bundle.v.backward(&tape, &g)?;
        self.opt_v.update(&mut self.bundle.v, &back.grads)?;
        Ok(loss)
    }

    fn update_policy(&mut self, batch: &Batch) -> Result<f64> {
        let cfg = self.bundle.config.clone();
        let (n, ad) = (batch.scale.len(), self.bundle.action_dim);
        let q = self.target_q(batch)?;
        let v = self.bundle.v.forward(&batch.s)?;
        let tape = self.bundle.actor.forward_tape(&batch.s)?;
        let mean: Vec<f32> = tape.output().as_slice().iter().map(|&u| libm::tanhf(u)).collect();
        let log_std = self.bundle.effective_log_std();
        let var: Vec<f64> = log_std.iter().map(|&l| libm::exp(2.0 * l as f64)).collect();
        let mut loss = 0.0;
        let mut g_mean = vec![0.0f64; n * ad];
        let mut g_log_std = vec![0.0f64; ad];
        for i in 0..n {
            let adv = q[i] - v.get(i, 0) as f64;
            let w = libm::exp(cfg.beta * adv).min(cfg.adv_clip);
            let k = w * batch.scale[i];
            for j in 0..ad {
                let d = batch.actions[i * ad + j] as f64 - mean[i * ad + j] as f64;
                let log_pi = -0.5 * d * d / var[j] - log_std[j] as f64 - 0.5 * LN_2PI;
                loss -= k * log_pi;
                g_mean[i * ad + j] -= k * d / var[j];
                g_log_std[j] -= k * (d * d / var[j] - 1.0);
            }
        }
        if cfg.lambda > 0.0 {
            let model = self.cvae.expect("checked at construction");
            let (vals, grad) = model.log_prob_and_grad(&batch.states, &mean, cfg.bc_samples, &mut self.reg_rng)?;
            for i in 0..n {
                if batch.c[i] == 0.0 {
                    continue;
                }
                let k = cfg.lambda * batch.scale[i];
                loss -= k * vals[i];
                for j in 0..ad {
                    g_mean[i * ad + j] -= k * grad[i * ad + j] as f64;
                }
            }
        }
        let mut g = Matrix::zeros(n, ad);
        for (idx, o) in g.as_mut_slice().iter_mut().enumerate() {
            let m = mean[idx] as f64;
            *o = (g_mean[idx] * (1.0 - m * m)) as f32;
        }
        let back = self.bundle.actor.backward(&tape, &g)?;
        self.opt_actor.update(&mut self.bundle.actor, &back.grads)?;
        let g_ls: Vec<f32> = self
            .bundle
            .log_std
            .iter()
            .zip(&g_log_std)
            .map(|(&raw, &gv)| if raw > cfg.log_std_min && raw < cfg.log_std_max { gv as f32 } else { 0.0 })
            .collect();
        self.opt_log_std.step(&mut self.bundle.log_std, &g_ls)?;
        Ok(loss)
    }

    fn update_critics(&mut self, batch: &Batch) -> Result<f64> {
        let gamma = self.bundle.config.gamma;
        let v_next = self.bundle.v.forward(&batch.next)?;
        let n = batch.scale.len();
        let y: Vec<f64> = (0..n).map(|i| batch.reward[i] + gamma * batch.not_done[i] * v_next.get(i, 0) as f64).collect();
        let mut total = 0.0;
        for head in 0..2 {
            let (net, opt) = if head == 0 { (&mut self.bundle.q1, &mut self.opt_q1) } else { (&mut self.bundle.q2, &mut self.opt_q2) };
            let tape = net.forward_tape(&batch.sa)?;
            let mut g = Matrix::zeros(n, 1);
            for i in 0..n {
                let d = tape.output().get(i, 0) as f64 - y[i];
                total += batch.scale[i] * d * d;
                g.set(i, 0, (2.0 * d * batch.scale[i]) as f32);
            }
            let back = net.backward(&tape, &g)?;
            opt.update(net, &back.grads)?;
        }
        Ok(total / 2.0)
    }
}

/// Snapshot evaluator returning `(return, normalized score)`.
pub type EvalFn<'a> = &'a mut dyn FnMut(&PolicyBundle) -> Result<(f64, f64)>;

/// Runs `steps` updates, logging every `log_every` steps (and the last one).
/// `eval` supplies `(return, normalized score)` for a snapshot when given.
pub fn train(
    tar: &TransitionDataset,
    source: SourceRows<'_>,
    cvae: Option<&CvaeModel>,
    cfg: &IqlConfig,
    steps: usize,
    seed: u64,
    mut eval: Option<EvalFn<'_>>,
) -> Result<(PolicyBundle, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(tar, source, cvae, cfg, seed)?;
    let (mean_omega, frac_selected) = trainer.source().selection_summary();
    let mut rows = Vec::new();
    let mut acc = StepLosses { loss_v: 0.0, loss_q: 0.0, loss_pi: 0.0 };
    let mut since = 0usize;
    for step in 1..=steps {
        let l = trainer.step()?;
        acc.loss_v += l.loss_v;
        acc.loss_q += l.loss_q;
        acc.loss_pi += l.loss_pi;
        since += 1;
        if step % cfg.log_every == 0 || step == steps {
            let (eval_return, eval_ns) = match eval.as_mut() {
                Some(f) => {
                    let (j, ns) = f(trainer.bundle())?;
                    (Some(j), Some(ns))
                }
                None => (None, None),
            };
            let k = since as f64;
            rows.push(MetricsRow {
                step,
                loss_v: acc.loss_v / k,
                loss_q: acc.loss_q / k,
                loss_pi: acc.loss_pi / k,
                mean_omega,
                frac_selected,
                eval_return,
                eval_ns,
            });
            acc = StepLosses { loss_v: 0.0, loss_q: 0.0, loss_pi: 0.0 };
            since = 0;
        }
    }
    Ok((trainer.into_bundle(), rows))
}
