//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown keys are errors. A config file is read
//! first and command-line overrides are applied on top.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dmc_core::cvae::CvaeConfig;
use dmc_core::diffusion::{DiffusionConfig, GuidanceConfig};
use dmc_core::env::{CemConfig, EnvSpec, Quality, RewardKind};
use dmc_core::iql::IqlConfig;
use dmc_core::knn::ClassifierConfig;

use crate::error::{Error, Result};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("src", "", "source dataset (.dmcd or .csv)"),
    ("tar", "", "target dataset (.dmcd or .csv)"),
    ("out", "out", "output directory"),
    ("seed", "0", "master seed; every stage derives its streams from it"),
    ("k", "5", "neighbors for the gap score"),
    ("xi", "50", "selection ratio in percent: source rows below this weight quantile are gated out"),
    ("lambda", "0.1", "weight of the behavior-model policy regularizer"),
    ("kappa", "90", "generation conditions are drawn from the [kappa, 100] weight percentiles"),
    ("guidance", "1.5", "classifier-free guidance strength"),
    ("count", "1000000", "rows to generate"),
    ("sampler_steps", "18", "Euler steps when sampling"),
    ("generated", "auto", "generated rows for policy training: a path, `auto` (out/generated.dmcd if present) or `none`"),
    ("diffusion.hidden", "256,256", "denoiser hidden layer sizes"),
    ("diffusion.steps", "20000", "denoiser training steps"),
    ("diffusion.batch", "256", "denoiser batch size"),
    ("diffusion.lr", "3e-4", "denoiser learning rate"),
    ("diffusion.schedule_steps", "18", "noise levels in the training schedule"),
    ("diffusion.sigma_min", "0.002", "smallest noise level"),
    ("diffusion.sigma_max", "80", "largest noise level"),
    ("diffusion.rho", "7", "schedule curvature"),
    ("diffusion.null_prob", "0.25", "probability of the null condition during training"),
    ("diffusion.holdout", "0.05", "fraction of source rows held out for the loss trace"),
    ("diffusion.log_every", "1000", "steps between loss-trace rows"),
    ("rl.mode", "dmc", "dmc (weighted, regularized), pooled (naive mixing) or target (target rows only)"),
    ("rl.steps", "1000000", "policy training steps"),
    ("rl.hidden", "256,256", "actor and critic hidden layer sizes"),
    ("rl.lr", "3e-4", "learning rate of every RL network"),
    ("rl.batch", "128", "rows per step from each of source and target"),
    ("rl.polyak", "0.005", "target-critic update coefficient"),
    ("rl.gamma", "0.99", "discount"),
    ("rl.expectile", "0.7", "value expectile"),
    ("rl.beta", "3", "advantage temperature"),
    ("rl.adv_clip", "100", "upper clip of the advantage weights"),
    ("rl.bc_samples", "8", "latent samples per behavior log-likelihood"),
    ("rl.log_every", "1000", "steps between metric rows"),
    ("rl.eval_episodes", "10", "episodes per metric-row evaluation (needs reference.json)"),
    ("cvae.hidden", "256,256", "behavior model hidden layer sizes"),
    ("cvae.steps", "20000", "behavior model training steps"),
    ("cvae.batch", "256", "behavior model batch size"),
    ("cvae.lr", "3e-4", "behavior model learning rate"),
    ("cvae.latent_dim", "auto", "latent size; auto = min(2 * action_dim, 8)"),
    ("cvae.sigma_dec", "0.1", "decoder standard deviation"),
    ("eval.episodes", "100", "episodes for `evaluate`"),
    ("eval.seed", "1000", "seed of the evaluation episodes"),
    ("env.name", "pointmass", "environment name"),
    ("env.dt", "0.1", "integration step"),
    ("env.gravity", "2", "source gravity (distance/step^2 per unit dt)"),
    ("env.gain", "3", "control gain"),
    ("env.damping", "0.9", "velocity damping"),
    ("env.clip0", "1", "action clamp, dimension 0"),
    ("env.clip1", "1", "action clamp, dimension 1"),
    ("env.horizon", "50", "episode length"),
    ("env.goal_x", "1", "goal position x"),
    ("env.goal_y", "1", "goal position y"),
    ("env.goal_radius", "0.1", "goal region radius"),
    ("env.goal_bonus", "1", "reward bonus inside the goal region"),
    ("env.goal_terminates", "false", "whether reaching the goal ends the episode"),
    ("env.reward", "goal_distance", "reward function"),
    ("env.reward_offset", "0", "constant added to every reward"),
    ("env.noise_std", "0.01", "process noise"),
    ("env.shift", "gravity", "target shift: gravity (halved) or kinematic (one action clamp shrunk)"),
    ("env.shift_dim", "1", "action dimension clamped by the kinematic shift"),
    ("env.shift_limit", "0.3", "clamp of the kinematic shift"),
    ("collect.src_rows", "10000", "source transitions to collect"),
    ("collect.tar_rows", "5000", "target transitions to collect"),
    ("collect.src_quality", "medium", "random, medium or expert"),
    ("collect.tar_quality", "medium", "random, medium or expert"),
    ("collect.ref_episodes", "100", "episodes for the reference returns"),
    ("collect.cem_iterations", "25", "expert search iterations"),
    ("diagnose.bins", "30", "histogram bins"),
    ("diagnose.classifier_hidden", "256,256", "domain classifier hidden layer sizes"),
    ("diagnose.classifier_epochs", "1", "domain classifier epochs"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(Error::Config(format!("{origin}:{}: `{k}` already set on line {prev}", n + 1)));
            }
            cfg.set(k, v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key `{key}`"))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Rebuilds a config from a recorded key map, rejecting unknown keys.
    pub fn from_values(values: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in values {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// `key = value` lines for every key, in key order.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| Error::Config(format!("`{key}` = `{v}`: {e}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key);
        let out: std::result::Result<Vec<usize>, _> = v.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match out {
            Ok(l) if !l.is_empty() && l.iter().all(|&x| x > 0) => Ok(l),
            _ => Err(Error::Config(format!("`{key}` = `{v}`: expected comma-separated positive sizes"))),
        }
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        let v = self.get(key);
        if v.is_empty() {
            return Err(Error::Config(format!("`{key}` is required")));
        }
        Ok(PathBuf::from(v))
    }

    pub fn src(&self) -> Result<PathBuf> {
        self.path("src")
    }

    pub fn tar(&self) -> Result<PathBuf> {
        self.path("tar")
    }

    pub fn out(&self) -> Result<PathBuf> {
        self.path("out")
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn k(&self) -> Result<usize> {
        match self.parsed("k")? {
            0 => Err(Error::Config("`k` must be at least 1".into())),
            k => Ok(k),
        }
    }

    pub fn diffusion(&self) -> Result<DiffusionConfig> {
        let c = DiffusionConfig {
            hidden: self.list("diffusion.hidden")?,
            train_steps: self.parsed("diffusion.steps")?,
            batch_size: self.parsed("diffusion.batch")?,
            lr: self.parsed("diffusion.lr")?,
            schedule_steps: self.parsed("diffusion.schedule_steps")?,
            sigma_min: self.parsed("diffusion.sigma_min")?,
            sigma_max: self.parsed("diffusion.sigma_max")?,
            rho: self.parsed("diffusion.rho")?,
            null_prob: self.parsed("diffusion.null_prob")?,
            holdout_frac: self.parsed("diffusion.holdout")?,
            log_every: self.parsed("diffusion.log_every")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        let c = GuidanceConfig {
            guidance: self.parsed("guidance")?,
            kappa: self.parsed("kappa")?,
            count: self.parsed("count")?,
            sampler_steps: self.parsed("sampler_steps")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn mode(&self) -> Result<Mode> {
        match self.get("rl.mode") {
            "dmc" => Ok(Mode::Dmc),
            "pooled" => Ok(Mode::Pooled),
            "target" => Ok(Mode::TargetOnly),
            other => Err(Error::Config(format!("`rl.mode` = `{other}`: expected dmc, pooled or target"))),
        }
    }

    /// Learner settings. Baseline modes drop the regularizer.
    pub fn iql(&self) -> Result<IqlConfig> {
        let batch: usize = self.parsed("rl.batch")?;
        let c = IqlConfig {
            hidden: self.list("rl.hidden")?,
            gamma: self.parsed("rl.gamma")?,
            expectile: self.parsed("rl.expectile")?,
            beta: self.parsed("rl.beta")?,
            adv_clip: self.parsed("rl.adv_clip")?,
            polyak: self.parsed("rl.polyak")?,
            lr: self.parsed("rl.lr")?,
            batch_tar: batch,
            batch_src: batch,
            lambda: if self.mode()? == Mode::Dmc { self.parsed("lambda")? } else { 0.0 },
            xi: self.parsed("xi")?,
            bc_samples: self.parsed("rl.bc_samples")?,
            log_every: self.parsed("rl.log_every")?,
            ..IqlConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn cvae(&self) -> Result<CvaeConfig> {
        let latent_dim = match self.get("cvae.latent_dim") {
            "auto" => None,
            _ => Some(self.parsed("cvae.latent_dim")?),
        };
        Ok(CvaeConfig {
            hidden: self.list("cvae.hidden")?,
            latent_dim,
            sigma_dec: self.parsed("cvae.sigma_dec")?,
            train_steps: self.parsed("cvae.steps")?,
            batch_size: self.parsed("cvae.batch")?,
            lr: self.parsed("cvae.lr")?,
            ..CvaeConfig::default()
        })
    }

    pub fn classifier(&self) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            hidden: self.list("diagnose.classifier_hidden")?,
            epochs: self.parsed("diagnose.classifier_epochs")?,
            ..ClassifierConfig::default()
        })
    }

    pub fn cem(&self) -> Result<CemConfig> {
        Ok(CemConfig { iterations: self.parsed("collect.cem_iterations")?, ..CemConfig::default() })
    }

    pub fn quality(&self, key: &str) -> Result<Quality> {
        Ok(Quality::parse(self.get(key))?)
    }

    /// The source environment.
    pub fn source_spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec {
            name: self.get("env.name").to_string(),
            dt: self.parsed("env.dt")?,
            gravity: self.parsed("env.gravity")?,
            gain: self.parsed("env.gain")?,
            damping: self.parsed("env.damping")?,
            joint_clip: [self.parsed("env.clip0")?, self.parsed("env.clip1")?],
            horizon: self.parsed("env.horizon")?,
            goal: [self.parsed("env.goal_x")?, self.parsed("env.goal_y")?],
            goal_radius: self.parsed("env.goal_radius")?,
            goal_bonus: self.parsed("env.goal_bonus")?,
            reward_offset: self.parsed("env.reward_offset")?,
            reward: RewardKind::parse(self.get("env.reward"))?,
            noise_std: self.parsed("env.noise_std")?,
            goal_terminates: self.parsed("env.goal_terminates")?,
            ..EnvSpec::point_mass()
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The target environment: the source with the configured shift.
    pub fn target_spec(&self) -> Result<EnvSpec> {
        let src = self.source_spec()?;
        let tar = match self.get("env.shift") {
            "gravity" => src.gravity_shifted(),
            "kinematic" => src.kinematic_shifted(self.parsed("env.shift_dim")?, self.parsed("env.shift_limit")?)?,
            other => return Err(Error::Config(format!("`env.shift` = `{other}`: expected gravity or kinematic"))),
        };
        src.ensure_same_task(&tar)?;
        Ok(tar)
    }

    /// Checks that every key parses.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.k()?;
        self.diffusion()?;
        self.guidance()?;
        self.iql()?;
        self.cvae()?;
        self.classifier()?;
        self.cem()?;
        self.quality("collect.src_quality")?;
        self.quality("collect.tar_quality")?;
        self.target_spec()?;
        for key in [
            "rl.steps",
            "rl.eval_episodes",
            "eval.episodes",
            "collect.src_rows",
            "collect.tar_rows",
            "collect.ref_episodes",
            "diagnose.bins",
        ] {
            self.parsed::<usize>(key)?;
        }
        self.parsed::<u64>("eval.seed")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dmc,
    Pooled,
    TargetOnly,
}
