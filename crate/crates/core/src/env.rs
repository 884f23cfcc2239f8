//! Point-mass environment family with controllable dynamics shift.
//!
//! State is `(px, py, vx, vy)`, actions are accelerations in `[-1, 1]²`.
//! One step integrates
//!
//! ```text
//! v' = damping · v + (gain · clip(a, ±joint_clip) − (0, g)) · dt
//! p' = p + v' · dt
//! ```
//!
//! plus Gaussian process noise on all four coordinates. The reward is
//! `offset − ‖p' − goal‖`, plus a bonus inside the goal radius. Source and
//! target specs may differ only in `{gravity, gain, damping, joint_clip}`.

use alloc::{format, string::String, vec::Vec};

use rand::Rng as _;

use crate::dataset::{Origin, TransitionDataset};
use crate::error::{Error, Result};
use crate::rng::{self, normal_f64, Rng};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

pub type State = [f64; STATE_DIM];
pub type Action = [f64; ACTION_DIM];

/// Reward function identifier. Only one family exists; the id is carried so
/// specs can assert they share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    GoalDistance,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::GoalDistance => "goal_distance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "goal_distance" => Ok(RewardKind::GoalDistance),
            _ => Err(Error::invalid(format!("unknown reward function `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub dt: f64,
    pub gravity: f64,
    pub gain: f64,
    pub damping: f64,
    /// Per-dimension action clamp applied after the `[-1, 1]` box.
    pub joint_clip: Action,
    pub horizon: usize,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub goal_bonus: f64,
    /// Constant added to every reward.
    pub reward_offset: f64,
    pub reward: RewardKind,
    /// Initial positions are uniform in this box; initial velocity is zero.
    pub init_low: [f64; 2],
    pub init_high: [f64; 2],
    pub noise_std: f64,
    /// Whether reaching the goal ends the episode. Off by default so every
    /// episode has the same length.
    pub goal_terminates: bool,
}

impl EnvSpec {
    /// The default source domain.
    pub fn point_mass() -> Self {
        EnvSpec {
            name: String::from("pointmass"),
            dt: 0.1,
            gravity: 2.0,
            gain: 3.0,
            damping: 0.9,
            joint_clip: [1.0, 1.0],
            horizon: 50,
            goal: [1.0, 1.0],
            goal_radius: 0.1,
            goal_bonus: 1.0,
            reward_offset: 0.0,
            reward: RewardKind::GoalDistance,
            init_low: [-1.0, -1.0],
            init_high: [-0.5, -0.5],
            noise_std: 0.01,
            goal_terminates: false,
        }
    }

    /// Same task with gravity halved.
    pub fn gravity_shifted(&self) -> Self {
        EnvSpec { name: format!("{}-halfgravity", self.name), gravity: self.gravity / 2.0, ..self.clone() }
    }

    /// Same task with the clamp on action dimension `dim` shrunk to `limit`.
    pub fn kinematic_shifted(&self, dim: usize, limit: f64) -> Result<Self> {
        if dim >= ACTION_DIM {
            return Err(Error::invalid(format!("action dimension {dim} out of range")));
        }
        let mut out = EnvSpec { name: format!("{}-clip{dim}", self.name), ..self.clone() };
        out.joint_clip[dim] = limit;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let finite =
            [self.dt, self.gravity, self.gain, self.damping, self.goal_radius, self.goal_bonus, self.reward_offset, self.noise_std]
                .iter()
                .chain(&self.joint_clip)
                .chain(&self.goal)
                .chain(&self.init_low)
                .chain(&self.init_high)
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("spec `{}` has non-finite parameters", self.name)));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if self.dt <= 0.0 {
            return Err(Error::invalid("dt must be positive"));
        }
        if self.noise_std < 0.0 || self.goal_radius < 0.0 {
            return Err(Error::invalid("noise and goal radius must be non-negative"));
        }
        if self.joint_clip.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid("joint clip must lie in [0, 1]"));
        }
        if self.init_low.iter().zip(&self.init_high).any(|(l, h)| l > h) {
            return Err(Error::invalid("initial-state box is inverted"));
        }
        Ok(())
    }

    /// Checks that `other` shares everything except the dynamics parameters.
    pub fn ensure_same_task(&self, other: &EnvSpec) -> Result<()> {
        let mut diffs = Vec::new();
        if self.dt != other.dt {
            diffs.push("dt");
        }
        if self.horizon != other.horizon {
            diffs.push("horizon");
        }
        if self.goal != other.goal || self.goal_radius != other.goal_radius || self.goal_bonus != other.goal_bonus {
            diffs.push("goal");
        }
        if self.reward != other.reward || self.reward_offset != other.reward_offset {
            diffs.push("reward");
        }
        if self.init_low != other.init_low || self.init_high != other.init_high {
            diffs.push("initial state");
        }
        if self.noise_std != other.noise_std {
            diffs.push("noise");
        }
        if self.goal_terminates != other.goal_terminates {
            diffs.push("termination");
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("specs `{}` and `{}` differ in {}", self.name, other.name, diffs.join(", "))))
        }
    }

    pub fn initial_state(&self, rng: &mut Rng) -> State {
        let mut s = [0.0; STATE_DIM];
        for j in 0..2 {
            s[j] =
                if self.init_low[j] < self.init_high[j] { rng.random_range(self.init_low[j]..self.init_high[j]) } else { self.init_low[j] };
        }
        s
    }

    fn dist_to_goal(&self, s: &State) -> f64 {
        libm::hypot(s[0] - self.goal[0], s[1] - self.goal[1])
    }

    pub fn reward_at(&self, s: &State) -> (f64, bool) {
        let dist = self.dist_to_goal(s);
        let inside = dist <= self.goal_radius;
        let bonus = if inside { self.goal_bonus } else { 0.0 };
        (self.reward_offset - dist + bonus, inside)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: State,
    pub reward: f64,
    /// True termination (goal reached with `goal_terminates`); horizon
    /// truncation is handled by the episode runner.
    pub terminal: bool,
}

/// One transition of the dynamics.
pub fn step(spec: &EnvSpec, state: &State, action: &Action, rng: &mut Rng) -> Result<StepOutcome> {
    if let Some(index) = state.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "state", index });
    }
    if let Some(index) = action.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "action", index });
    }
    let mut a = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        let c = spec.joint_clip[j];
        a[j] = action[j].clamp(-1.0, 1.0).clamp(-c, c);
    }
    let accel = [spec.gain * a[0], spec.gain * a[1] - spec.gravity];
    let mut next = [0.0; STATE_DIM];
    for j in 0..2 {
        next[2 + j] = spec.damping * state[2 + j] + accel[j] * spec.dt;
        next[j] = state[j] + next[2 + j] * spec.dt;
    }
    if spec.noise_std > 0.0 {
        for v in next.iter_mut() {
            *v += spec.noise_std * normal_f64(rng);
        }
    }
    let (reward, inside) = spec.reward_at(&next);
    Ok(StepOutcome { next, reward, terminal: inside && spec.goal_terminates })
}

/// Anything that maps a state to an action. Stochastic policies draw from
/// `rng`; learned policies return their mean action.
pub trait Policy {
    fn act(&self, state: &State, rng: &mut Rng) -> Action;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, state: &State, rng: &mut Rng) -> Action {
        (**self).act(state, rng)
    }
}

/// Uniform actions over the box.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _state: &State, rng: &mut Rng) -> Action {
        [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
    }
}

/// PD controller toward the goal with a constant feed-forward term:
/// `a = kp ⊙ (goal − p) − kd ⊙ v + bias`, clamped to the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearController {
    pub goal: [f64; 2],
    pub kp: [f64; 2],
    pub kd: [f64; 2],
    pub bias: [f64; 2],
}

impl LinearController {
    fn from_params(goal: [f64; 2], p: &[f64; 6]) -> Self {
        LinearController { goal, kp: [p[0], p[1]], kd: [p[2], p[3]], bias: [p[4], p[5]] }
    }

    pub fn params(&self) -> [f64; 6] {
        [self.kp[0], self.kp[1], self.kd[0], self.kd[1], self.bias[0], self.bias[1]]
    }
}

impl Policy for LinearController {
    fn act(&self, s: &State, _rng: &mut Rng) -> Action {
        let mut a = [0.0; ACTION_DIM];
        for j in 0..2 {
            a[j] = (self.kp[j] * (self.goal[j] - s[j]) - self.kd[j] * s[2 + j] + self.bias[j]).clamp(-1.0, 1.0);
        }
        a
    }
}

/// Expert corrupted by Gaussian action noise and uniform random actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyExpert {
    pub expert: LinearController,
    pub noise_std: f64,
    pub random_prob: f64,
}

impl Policy for NoisyExpert {
    fn act(&self, s: &State, rng: &mut Rng) -> Action {
        if rng.random::<f64>() < self.random_prob {
            return RandomPolicy.act(s, rng);
        }
        let mut a = self.expert.act(s, rng);
        for v in a.iter_mut() {
            *v = (*v + self.noise_std * normal_f64(rng)).clamp(-1.0, 1.0);
        }
        a
    }
}

/// Episode `i` of a seeded batch uses the environment stream `3i` and the
/// policy stream `3i + 1`, so different policies evaluated with one seed
/// face the same initial states and process noise.
fn episode_rngs(seed: u64, i: usize) -> (Rng, Rng) {
    (rng::stream(seed, 3 * i as u64), rng::stream(seed, 3 * i as u64 + 1))
}

/// Runs one episode; `sink` sees every transition.
fn run_episode(
    spec: &EnvSpec,
    policy: &dyn Policy,
    seed: u64,
    i: usize,
    mut sink: impl FnMut(&State, &Action, &StepOutcome),
) -> Result<f64> {
    let (mut env_rng, mut pol_rng) = episode_rngs(seed, i);
    let mut s = spec.initial_state(&mut env_rng);
    let mut ret = 0.0;
    for _ in 0..spec.horizon {
        let a = policy.act(&s, &mut pol_rng);
        let out = step(spec, &s, &a, &mut env_rng)?;
        sink(&s, &a, &out);
        ret += out.reward;
        s = out.next;
        if out.terminal {
            break;
        }
    }
    Ok(ret)
}

/// Returns of `episodes` seeded episodes.
pub fn rollout_returns(spec: &EnvSpec, policy: &dyn Policy, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    (0..episodes).map(|i| run_episode(spec, policy, seed, i, |_, _, _| {})).collect()
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Random and expert reference returns for normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReference {
    pub j_random: f64,
    pub j_expert: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalReference {
    pub const MIN_EPISODES: usize = 100;

    pub fn compute(spec: &EnvSpec, expert: &dyn Policy, episodes: usize, seed: u64) -> Result<Self> {
        if episodes < Self::MIN_EPISODES {
            return Err(Error::invalid(format!("reference needs at least {} episodes", Self::MIN_EPISODES)));
        }
        let (j_random, _) = mean_and_se(&rollout_returns(spec, &RandomPolicy, episodes, seed)?);
        let (j_expert, _) = mean_and_se(&rollout_returns(spec, expert, episodes, seed)?);
        let r = EvalReference { j_random, j_expert, episodes, seed };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.j_random.is_finite() && self.j_expert.is_finite()) {
            return Err(Error::invalid("reference returns must be finite"));
        }
        if self.j_expert <= self.j_random {
            return Err(Error::invalid(format!(
                "degenerate reference: expert return {} does not exceed random return {}",
                self.j_expert, self.j_random
            )));
        }
        Ok(())
    }

    pub fn normalized(&self, j: f64) -> f64 {
        (j - self.j_random) / (self.j_expert - self.j_random) * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mean_return: f64,
    pub std_error: f64,
    pub normalized_score: f64,
}

/// Average return over seeded episodes and its normalized score.
pub fn evaluate(spec: &EnvSpec, policy: &dyn Policy, reference: &EvalReference, episodes: usize, seed: u64) -> Result<Evaluation> {
    if episodes < 1 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    reference.validate()?;
    let (mean_return, std_error) = mean_and_se(&rollout_returns(spec, policy, episodes, seed)?);
    Ok(Evaluation { mean_return, std_error, normalized_score: reference.normalized(mean_return) })
}

/// Cross-entropy-method settings for fitting the expert controller.
#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    pub iterations: usize,
    pub population: usize,
    pub elites: usize,
    pub episodes: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig { iterations: 25, population: 48, elites: 8, episodes: 16 }
    }
}

/// Fits a [`LinearController`] for `spec` by cross-entropy search over its
/// six gains, scoring candidates on a fixed set of episodes.
pub fn train_expert(spec: &EnvSpec, cfg: &CemConfig, seed: u64) -> Result<LinearController> {
    spec.validate()?;
    if cfg.elites == 0 || cfg.elites > cfg.population || cfg.episodes == 0 {
        return Err(Error::invalid("CEM needs 1 ≤ elites ≤ population and at least one episode"));
    }
    let mut rng = rng::stream(seed, 0);
    let eval_seed = rng::derive_seed(seed, 1);
    let mut mean = [1.0, 1.0, 0.5, 0.5, 0.0, 0.0];
    let mut std = [1.0; 6];
    let score = |p: &[f64; 6]| -> Result<f64> {
        let c = LinearController::from_params(spec.goal, p);
        Ok(rollout_returns(spec, &c, cfg.episodes, eval_seed)?.iter().sum::<f64>())
    };
    let mut best = (score(&mean)?, mean);
    for _ in 0..cfg.iterations {
        let mut pop: Vec<(f64, [f64; 6])> = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            let mut p = [0.0; 6];
            for j in 0..6 {
                p[j] = mean[j] + std[j] * normal_f64(&mut rng);
            }
            pop.push((score(&p)?, p));
        }
        pop.sort_by(|a, b| b.0.total_cmp(&a.0));
        if pop[0].0 > best.0 {
            best = pop[0];
        }
        for j in 0..6 {
            let m = pop[..cfg.elites].iter().map(|e| e.1[j]).sum::<f64>() / cfg.elites as f64;
            let v = pop[..cfg.elites].iter().map(|e| (e.1[j] - m) * (e.1[j] - m)).sum::<f64>() / cfg.elites as f64;
            mean[j] = m;
            std[j] = libm::sqrt(v) + 0.02;
        }
    }
    Ok(LinearController::from_params(spec.goal, &best.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Random,
    Medium,
    Expert,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Random => "random",
            Quality::Medium => "medium",
            Quality::Expert => "expert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Quality::Random),
            "medium" => Ok(Quality::Medium),
            "expert" => Ok(Quality::Expert),
            _ => Err(Error::invalid(format!("unknown dataset quality `{s}`"))),
        }
    }
}

/// Medium behavior: expert with this action noise, mixed with random actions.
pub const MEDIUM_NOISE_STD: f64 = 0.5;
pub const MEDIUM_RANDOM_PROB: f64 = 0.3;
/// Accepted range of the medium policy's normalized return.
pub const MEDIUM_RATIO: (f64, f64) = (0.3, 0.6);

#[derive(Debug, Clone)]
pub struct Collected {
    pub dataset: TransitionDataset,
    /// Mean return of the collected episodes.
    pub mean_return: f64,
    /// `(J − J_r) / (J_e − J_r)` of the behavior policy on the tuning rollouts.
    pub return_ratio: f64,
    /// Random-action probability of the behavior policy.
    pub random_prob: f64,
}

/// Picks the random-action probability so that the noisy expert's
/// normalized return lies in [`MEDIUM_RATIO`]: the default mixing first,
/// then bisection toward the middle of the range.
pub fn tune_medium(spec: &EnvSpec, expert: &LinearController, reference: &EvalReference, seed: u64) -> Result<(NoisyExpert, f64)> {
    let ratio = |p: f64| -> Result<f64> {
        let pol = NoisyExpert { expert: *expert, noise_std: MEDIUM_NOISE_STD, random_prob: p };
        let (j, _) = mean_and_se(&rollout_returns(spec, &pol, reference.episodes, seed)?);
        Ok(reference.normalized(j) / 100.0)
    };
    let inside = |r: f64| (MEDIUM_RATIO.0..=MEDIUM_RATIO.1).contains(&r);
    let target = 0.5 * (MEDIUM_RATIO.0 + MEDIUM_RATIO.1);
    let mut p = MEDIUM_RANDOM_PROB;
    let mut r = ratio(p)?;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        if inside(r) {
            break;
        }
        // More random actions lower the return.
        if r > target {
            lo = p;
        } else {
            hi = p;
        }
        p = 0.5 * (lo + hi);
        r = ratio(p)?;
    }
    if !inside(r) {
        return Err(Error::invalid(format!("could not tune a medium policy for `{}` (ratio {r:.3})", spec.name)));
    }
    Ok((NoisyExpert { expert: *expert, noise_std: MEDIUM_NOISE_STD, random_prob: p }, r))
}

/// Rolls out the behavior policy of the requested quality until `n`
/// transitions are gathered. Horizon truncation is not recorded as terminal.
pub fn collect_dataset(
    spec: &EnvSpec,
    quality: Quality,
    n: usize,
    seed: u64,
    expert: Option<&LinearController>,
    reference: &EvalReference,
    origin: Origin,
) -> Result<Collected> {
    spec.validate()?;
    reference.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot collect an empty dataset"));
    }
    let tune_seed = rng::derive_seed(seed, 1);
    let (policy, ratio, random_prob): (alloc::boxed::Box<dyn Policy>, f64, f64) = match (quality, expert) {
        (Quality::Random, _) => (alloc::boxed::Box::new(RandomPolicy), 0.0, 1.0),
        (_, None) => return Err(Error::invalid(format!("no expert available for `{}`", spec.name))),
        (Quality::Expert, Some(e)) => (alloc::boxed::Box::new(*e), 1.0, 0.0),
        (Quality::Medium, Some(e)) => {
            let (pol, r) = tune_medium(spec, e, reference, tune_seed)?;
            (alloc::boxed::Box::new(pol), r, pol.random_prob)
        }
    };
    let ratio = match quality {
        Quality::Medium => ratio,
        _ => {
            let (j, _) = mean_and_se(&rollout_returns(spec, policy.as_ref(), reference.episodes, tune_seed)?);
            reference.normalized(j) / 100.0
        }
    };
    let data_seed = rng::derive_seed(seed, 2);
    let mut ds = TransitionDataset::with_capacity(STATE_DIM, ACTION_DIM, n);
    let mut returns = Vec::new();
    let mut ep = 0;
    let mut err = None;
    while ds.len() < n {
        let ret = run_episode(spec, policy.as_ref(), data_seed, ep, |s, a, out| {
            if ds.len() < n && err.is_none() {
                let f = |v: &[f64]| -> [f32; 4] {
                    let mut o = [0.0f32; 4];
                    o.iter_mut().zip(v).for_each(|(o, v)| *o = *v as f32);
                    o
                };
                let (sf, af, nf) = (f(s), f(a), f(&out.next));
                if let Err(e) = ds.push(&sf, &af[..ACTION_DIM], out.reward as f32, &nf, out.terminal, origin) {
                    err = Some(e);
                }
            }
        })?;
        if let Some(e) = err.take() {
            return Err(e);
        }
        returns.push(ret);
        ep += 1;
    }
    let (mean_return, _) = mean_and_se(&returns);
    Ok(Collected { dataset: ds, mean_return, return_ratio: ratio, random_prob })
}

#[cfg(test)]
mod tests;
