//! Model checkpoints: a DMCW weight file plus a JSON sidecar holding
//! everything that is not a network (schedules, normalization, clamps).
//!
//! The sidecar records the SHA-256 of its weight file and loading refuses a
//! mismatched pair.

use std::fs;
use std::path::{Path, PathBuf};

use dmc_core::cvae::{CvaeModel, LOGVAR_MAX, LOGVAR_MIN};
use dmc_core::diffusion::{DenoiserModel, NoiseSchedule, MASK_NULL, MASK_ON};
use dmc_core::iql::{IqlConfig, PolicyBundle};
use dmc_core::tensor::{Activation, Mlp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{decode_networks, encode_networks};
use crate::manifest::sha256_hex;

/// `policy.dmcw` → `policy.dmcw.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSidecar {
    pub kind: String,
    pub weights_sha256: String,
    pub networks: Vec<String>,
    pub activation: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Feature order of the modeled vector.
    pub layout: Vec<String>,
    pub schedule_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigmas: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cond_mean: f64,
    pub cond_std: f64,
    /// Mask channel values for a present condition and the null token.
    pub mask_on: f32,
    pub mask_null: f32,
    /// The null token also zeroes the condition channel.
    pub null_condition_value: f32,
    pub trained_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeSidecar {
    pub kind: String,
    pub weights_sha256: String,
    pub networks: Vec<String>,
    pub activation: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub sigma_dec: f64,
    pub logvar_min: f32,
    pub logvar_max: f32,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub trained_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqlSettings {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub expectile: f64,
    pub beta: f64,
    pub adv_clip: f64,
    pub polyak: f32,
    pub lr: f32,
    pub batch_tar: usize,
    pub batch_src: usize,
    pub lambda: f64,
    pub xi: f64,
    pub bc_samples: usize,
    pub log_std_min: f32,
    pub log_std_max: f32,
    pub log_every: usize,
}

impl From<&IqlConfig> for IqlSettings {
    fn from(c: &IqlConfig) -> Self {
        IqlSettings {
            hidden: c.hidden.clone(),
            gamma: c.gamma,
            expectile: c.expectile,
            beta: c.beta,
            adv_clip: c.adv_clip,
            polyak: c.polyak,
            lr: c.lr,
            batch_tar: c.batch_tar,
            batch_src: c.batch_src,
            lambda: c.lambda,
            xi: c.xi,
            bc_samples: c.bc_samples,
            log_std_min: c.log_std_min,
            log_std_max: c.log_std_max,
            log_every: c.log_every,
        }
    }
}

impl From<&IqlSettings> for IqlConfig {
    fn from(c: &IqlSettings) -> Self {
        IqlConfig {
            hidden: c.hidden.clone(),
            gamma: c.gamma,
            expectile: c.expectile,
            beta: c.beta,
            adv_clip: c.adv_clip,
            polyak: c.polyak,
            lr: c.lr,
            batch_tar: c.batch_tar,
            batch_src: c.batch_src,
            lambda: c.lambda,
            xi: c.xi,
            bc_samples: c.bc_samples,
            log_std_min: c.log_std_min,
            log_std_max: c.log_std_max,
            log_every: c.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySidecar {
    pub kind: String,
    pub weights_sha256: String,
    pub networks: Vec<String>,
    pub activation: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub log_std: Vec<f32>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub config: IqlSettings,
    pub steps: usize,
}

const POLICY_NETS: [&str; 6] = ["q1", "q2", "q1_target", "q2_target", "v", "actor"];

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

fn save_pair<T: Serialize>(nets: &[&Mlp], weights: &Path, sidecar: impl FnOnce(String) -> T) -> Result<()> {
    let bytes = encode_networks(nets);
    fs::write(weights, &bytes).map_err(|e| Error::io(weights, e))?;
    write_json(&sidecar(sha256_hex(&bytes)), &sidecar_path(weights))
}

/// Reads the sidecar, checks the weight hash and returns both.
fn load_pair<T: DeserializeOwned>(weights: &Path, kind: &str, hash: impl Fn(&T) -> &str, expected_nets: usize) -> Result<(T, Vec<Mlp>)> {
    let side_path = sidecar_path(weights);
    let raw: serde_json::Value = read_json(&side_path)?;
    check_kind(weights, raw.get("kind").and_then(|k| k.as_str()).unwrap_or(""), kind)?;
    let side: T = serde_json::from_value(raw).map_err(|e| Error::Json { path: side_path.clone(), source: e })?;
    let bytes = fs::read(weights).map_err(|e| Error::io(weights, e))?;
    let got = sha256_hex(&bytes);
    if got != hash(&side) {
        return Err(Error::stale(weights, format!("sidecar {} expects sha256 {}, file has {got}", side_path.display(), hash(&side))));
    }
    let nets = decode_networks(weights, &bytes, Activation::Relu)?;
    if nets.len() != expected_nets {
        return Err(Error::format(weights, 0, format!("{} networks, expected {expected_nets}", nets.len())));
    }
    Ok((side, nets))
}

fn check_kind(path: &Path, got: &str, want: &str) -> Result<()> {
    if got != want {
        return Err(Error::format(&sidecar_path(path), 0, format!("checkpoint kind `{got}`, expected `{want}`")));
    }
    Ok(())
}

pub fn save_denoiser(m: &DenoiserModel, weights: &Path) -> Result<()> {
    m.validate()?;
    let s = m.state_dim;
    let mut layout: Vec<String> = (0..s).map(|i| format!("s{i}")).collect();
    layout.extend((0..m.action_dim).map(|i| format!("a{i}")));
    layout.push("r".into());
    layout.extend((0..s).map(|i| format!("ns{i}")));
    save_pair(&[&m.net], weights, |sha| DenoiserSidecar {
        kind: "denoiser".into(),
        weights_sha256: sha,
        networks: vec!["denoiser".into()],
        activation: "relu".into(),
        state_dim: m.state_dim,
        action_dim: m.action_dim,
        layout,
        schedule_steps: m.schedule.steps(),
        sigma_min: m.schedule.sigma_min,
        sigma_max: m.schedule.sigma_max,
        rho: m.schedule.rho,
        sigmas: m.schedule.sigmas().to_vec(),
        mean: m.mean.clone(),
        std: m.std.clone(),
        cond_mean: m.cond_mean,
        cond_std: m.cond_std,
        mask_on: MASK_ON,
        mask_null: MASK_NULL,
        null_condition_value: 0.0,
        trained_steps: m.trained_steps,
    })
}

pub fn load_denoiser(weights: &Path) -> Result<DenoiserModel> {
    let (side, mut nets) = load_pair::<DenoiserSidecar>(weights, "denoiser", |s| &s.weights_sha256, 1)?;
    if side.mask_on != MASK_ON || side.mask_null != MASK_NULL || side.null_condition_value != 0.0 {
        return Err(Error::format(&sidecar_path(weights), 0, "unsupported null-token convention"));
    }
    let schedule = NoiseSchedule::new(side.schedule_steps, side.sigma_min, side.sigma_max, side.rho)?;
    if schedule.sigmas() != side.sigmas.as_slice() {
        return Err(Error::format(&sidecar_path(weights), 0, "recorded sigmas do not match the schedule parameters"));
    }
    let m = DenoiserModel {
        state_dim: side.state_dim,
        action_dim: side.action_dim,
        net: nets.pop().unwrap(),
        schedule,
        mean: side.mean,
        std: side.std,
        cond_mean: side.cond_mean,
        cond_std: side.cond_std,
        trained_steps: side.trained_steps,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_cvae(m: &CvaeModel, weights: &Path) -> Result<()> {
    m.validate()?;
    save_pair(&[&m.encoder, &m.decoder], weights, |sha| CvaeSidecar {
        kind: "behavior".into(),
        weights_sha256: sha,
        networks: vec!["encoder".into(), "decoder".into()],
        activation: "relu".into(),
        state_dim: m.state_dim,
        action_dim: m.action_dim,
        latent_dim: m.latent_dim,
        sigma_dec: m.sigma_dec,
        logvar_min: LOGVAR_MIN,
        logvar_max: LOGVAR_MAX,
        state_mean: m.state_mean.clone(),
        state_std: m.state_std.clone(),
        trained_steps: m.trained_steps,
    })
}

pub fn load_cvae(weights: &Path) -> Result<CvaeModel> {
    let (side, mut nets) = load_pair::<CvaeSidecar>(weights, "behavior", |s| &s.weights_sha256, 2)?;
    if side.logvar_min != LOGVAR_MIN || side.logvar_max != LOGVAR_MAX {
        return Err(Error::format(&sidecar_path(weights), 0, "unsupported log-variance clamp"));
    }
    let decoder = nets.pop().unwrap();
    let encoder = nets.pop().unwrap();
    let m = CvaeModel {
        state_dim: side.state_dim,
        action_dim: side.action_dim,
        latent_dim: side.latent_dim,
        sigma_dec: side.sigma_dec,
        encoder,
        decoder,
        state_mean: side.state_mean,
        state_std: side.state_std,
        trained_steps: side.trained_steps,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_policy(b: &PolicyBundle, weights: &Path) -> Result<()> {
    b.validate()?;
    save_pair(&[&b.q1, &b.q2, &b.q1_target, &b.q2_target, &b.v, &b.actor], weights, |sha| PolicySidecar {
        kind: "policy".into(),
        weights_sha256: sha,
        networks: POLICY_NETS.iter().map(|s| s.to_string()).collect(),
        activation: "relu".into(),
        state_dim: b.state_dim,
        action_dim: b.action_dim,
        log_std: b.log_std.clone(),
        state_mean: b.state_mean.clone(),
        state_std: b.state_std.clone(),
        config: IqlSettings::from(&b.config),
        steps: b.steps,
    })
}

pub fn load_policy(weights: &Path) -> Result<PolicyBundle> {
    let (side, nets) = load_pair::<PolicySidecar>(weights, "policy", |s| &s.weights_sha256, POLICY_NETS.len())?;
    let [q1, q2, q1_target, q2_target, v, actor]: [Mlp; 6] = nets.try_into().unwrap();
    let b = PolicyBundle {
        state_dim: side.state_dim,
        action_dim: side.action_dim,
        q1,
        q2,
        q1_target,
        q2_target,
        v,
        actor,
        log_std: side.log_std,
        state_mean: side.state_mean,
        state_std: side.state_std,
        config: IqlConfig::from(&side.config),
        steps: side.steps,
    };
    b.validate()?;
    Ok(b)
}
