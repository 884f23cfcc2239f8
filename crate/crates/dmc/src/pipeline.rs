//! Pipeline stages. Each stage reads its inputs, checks upstream artifacts
//! against the manifest, writes fixed-name outputs under `out` and records
//! itself in `out/manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dmc_core::cvae::train_cvae;
use dmc_core::dataset::{concat, Origin, TransitionDataset};
use dmc_core::diffusion::{augment_source, train_denoiser};
use dmc_core::env::{self, EnvSpec, EvalReference, LinearController, Policy};
use dmc_core::iql::{self, MeanActionPolicy, PolicyBundle, SourceRows};
use dmc_core::knn::{classifier_score, nn_distance_histogram, GapScorer, ScoreTable};
use dmc_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, read_json, sidecar_path, write_json};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{import_csv, load_dataset, save_dataset};
use crate::manifest::{input_key, sha256_file, verify_input, Manifest, StageRecord};
use crate::tables::{self, sig9};

pub const SOURCE_FILE: &str = "source.dmcd";
pub const TARGET_FILE: &str = "target.dmcd";
pub const EXPERT_FILE: &str = "expert.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const MODEL_FILE: &str = "model.dmcw";
pub const GENERATED_FILE: &str = "generated.dmcd";
pub const POLICY_FILE: &str = "policy.dmcw";
pub const BEHAVIOR_FILE: &str = "behavior.dmcw";
pub const METRICS_FILE: &str = "metrics.csv";

/// Stage seed offsets under the master seed.
const SEED_COLLECT: u64 = 10;
const SEED_DIFFUSION: u64 = 20;
const SEED_GENERATE: u64 = 30;
const SEED_POLICY: u64 = 40;
const SEED_BEHAVIOR: u64 = 41;
const SEED_DIAGNOSE: u64 = 50;

/// Stage commands in pipeline order; `rerun` replays them in this order.
pub const COMMANDS: &[&str] =
    &["collect", "score", "train-diffusion", "generate", "train-policy", "evaluate", "evaluate-expert", "diagnose"];

struct Run {
    cfg: RunConfig,
    command: &'static str,
    out: PathBuf,
    manifest: Manifest,
    started: Instant,
    started_unix: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Run {
    fn start(cfg: &RunConfig, command: &'static str) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out()?;
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Run {
            manifest: Manifest::load_or_default(&out)?,
            cfg: cfg.clone(),
            command,
            out,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn load(&mut self, path: &Path, origin: Origin) -> Result<TransitionDataset> {
        self.inputs.push(path.to_path_buf());
        load_any(path, origin)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    /// A model file and its sidecar.
    fn model_output(&mut self, name: &str) -> PathBuf {
        let p = self.output(name);
        self.outputs.push(format!("{name}.json"));
        p
    }

    /// Checks `file` against the manifest and returns its producing stage.
    fn upstream(&self, file: &str) -> Result<StageRecord> {
        Ok(self.manifest.verify_output(&self.out, file)?.clone())
    }

    fn finish(mut self) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(input_key(p), sha256_file(p)?);
        }
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), sha256_file(&self.out.join(name))?);
        }
        self.manifest.record(StageRecord {
            command: self.command.to_string(),
            config: self.cfg.values().clone(),
            inputs,
            outputs,
            seed: self.cfg.seed()?,
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        });
        self.manifest.save(&self.out)
    }
}

/// Loads a `.csv` or DMCD dataset.
pub fn load_any(path: &Path, origin: Origin) -> Result<TransitionDataset> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        import_csv(path, origin)
    } else {
        load_dataset(path, origin)
    }
}

fn ensure_same_config(stage: &StageRecord, cfg: &RunConfig, keys: &[&str], artifact: &Path) -> Result<()> {
    for k in keys {
        let recorded = stage.config.get(*k).map(String::as_str).unwrap_or("");
        if recorded != cfg.get(k) {
            return Err(Error::stale(artifact, format!("`{}` ran with {k} = {recorded}, now {k} = {}", stage.command, cfg.get(k))));
        }
    }
    Ok(())
}

/// Flat description of an environment, stored next to reference returns.
pub fn spec_map(s: &EnvSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("name", s.name.clone());
    put("dt", s.dt.to_string());
    put("gravity", s.gravity.to_string());
    put("gain", s.gain.to_string());
    put("damping", s.damping.to_string());
    put("joint_clip", format!("{},{}", s.joint_clip[0], s.joint_clip[1]));
    put("horizon", s.horizon.to_string());
    put("goal", format!("{},{}", s.goal[0], s.goal[1]));
    put("goal_radius", s.goal_radius.to_string());
    put("goal_bonus", s.goal_bonus.to_string());
    put("goal_terminates", s.goal_terminates.to_string());
    put("reward", s.reward.name().to_string());
    put("reward_offset", s.reward_offset.to_string());
    put("init_low", format!("{},{}", s.init_low[0], s.init_low[1]));
    put("init_high", format!("{},{}", s.init_high[0], s.init_high[1]));
    put("noise_std", s.noise_std.to_string());
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerFile {
    pub goal: [f64; 2],
    pub kp: [f64; 2],
    pub kd: [f64; 2],
    pub bias: [f64; 2],
}

impl From<&LinearController> for ControllerFile {
    fn from(c: &LinearController) -> Self {
        ControllerFile { goal: c.goal, kp: c.kp, kd: c.kd, bias: c.bias }
    }
}

impl From<&ControllerFile> for LinearController {
    fn from(c: &ControllerFile) -> Self {
        LinearController { goal: c.goal, kp: c.kp, kd: c.kd, bias: c.bias }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertFile {
    pub source: ControllerFile,
    pub target: ControllerFile,
}

/// Reference returns of the target environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFile {
    pub j_random: f64,
    pub j_expert: f64,
    pub episodes: usize,
    pub seed: u64,
    pub target_spec: BTreeMap<String, String>,
}

impl ReferenceFile {
    pub fn reference(&self) -> EvalReference {
        EvalReference { j_random: self.j_random, j_expert: self.j_expert, episodes: self.episodes, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedSummary {
    pub rows: usize,
    pub quality: String,
    pub mean_return: f64,
    pub return_ratio: f64,
    pub random_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub source: CollectedSummary,
    pub target: CollectedSummary,
    /// Normalized target score of the source expert: how much the shift hurts.
    pub source_expert_target_ns: f64,
}

pub fn collect(cfg: &RunConfig) -> Result<CollectSummary> {
    let mut run = Run::start(cfg, "collect")?;
    let seed = derive_seed(cfg.seed()?, SEED_COLLECT);
    let (src_spec, tar_spec) = (cfg.source_spec()?, cfg.target_spec()?);
    let cem = cfg.cem()?;
    let episodes = cfg.parsed("collect.ref_episodes")?;
    let e_src = env::train_expert(&src_spec, &cem, derive_seed(seed, 0))?;
    let e_tar = env::train_expert(&tar_spec, &cem, derive_seed(seed, 1))?;
    let r_src = EvalReference::compute(&src_spec, &e_src, episodes, derive_seed(seed, 2))?;
    let r_tar = EvalReference::compute(&tar_spec, &e_tar, episodes, derive_seed(seed, 3))?;
    let (sq, tq) = (cfg.quality("collect.src_quality")?, cfg.quality("collect.tar_quality")?);
    let src = env::collect_dataset(
        &src_spec,
        sq,
        cfg.parsed("collect.src_rows")?,
        derive_seed(seed, 4),
        Some(&e_src),
        &r_src,
        Origin::SourceReal,
    )?;
    let tar =
        env::collect_dataset(&tar_spec, tq, cfg.parsed("collect.tar_rows")?, derive_seed(seed, 5), Some(&e_tar), &r_tar, Origin::Target)?;
    let cross = env::evaluate(&tar_spec, &e_src, &r_tar, episodes, derive_seed(seed, 6))?;

    save_dataset(&src.dataset, &run.output(SOURCE_FILE))?;
    save_dataset(&tar.dataset, &run.output(TARGET_FILE))?;
    write_json(&ExpertFile { source: (&e_src).into(), target: (&e_tar).into() }, &run.output(EXPERT_FILE))?;
    let reference = ReferenceFile {
        j_random: r_tar.j_random,
        j_expert: r_tar.j_expert,
        episodes: r_tar.episodes,
        seed: r_tar.seed,
        target_spec: spec_map(&tar_spec),
    };
    write_json(&reference, &run.output(REFERENCE_FILE))?;
    let part = |c: &env::Collected, q: env::Quality| CollectedSummary {
        rows: c.dataset.len(),
        quality: q.name().to_string(),
        mean_return: c.mean_return,
        return_ratio: c.return_ratio,
        random_prob: c.random_prob,
    };
    let summary = CollectSummary { source: part(&src, sq), target: part(&tar, tq), source_expert_target_ns: cross.normalized_score };
    write_json(&summary, &run.output("collect.json"))?;
    run.finish()?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub k: usize,
    pub n_src: usize,
    pub n_tar: usize,
    pub kl_estimate: f64,
    pub rho_min: f64,
    /// Zero distances floored before taking logs.
    pub floored: usize,
    /// Weight percentiles 0, 10, ..., 100.
    pub weight_quantiles: Vec<f64>,
}

/// Nearest-rank percentiles `0, 10, ..., 100` of `values`.
pub fn deciles(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (0..=10)
        .map(|i| {
            let pos = ((i as f64 / 10.0) * (v.len() - 1) as f64).round() as usize;
            v[pos]
        })
        .collect()
}

/// Library call behind `score`: the table for `src` and the summary.
pub fn compute_scores(src: &TransitionDataset, tar: &TransitionDataset, k: usize) -> Result<(ScoreTable, ScoreSummary)> {
    let scorer = GapScorer::new(src, tar, k)?;
    let table = scorer.score_members(src)?;
    let kl = scorer.kl_estimate()?;
    let summary = ScoreSummary {
        k,
        n_src: src.len(),
        n_tar: tar.len(),
        kl_estimate: kl,
        rho_min: table.rho_min,
        floored: table.floored,
        weight_quantiles: deciles(&table.weight),
    };
    Ok((table, summary))
}

pub fn score(cfg: &RunConfig) -> Result<ScoreSummary> {
    let mut run = Run::start(cfg, "score")?;
    let src = run.load(&cfg.src()?, Origin::SourceReal)?;
    let tar = run.load(&cfg.tar()?, Origin::Target)?;
    let (table, summary) = compute_scores(&src, &tar, cfg.k()?)?;
    tables::write_scores(&table, 0, &run.output(SCORES_FILE))?;
    write_json(&summary, &run.output("score_summary.json"))?;
    run.finish()?;
    Ok(summary)
}

/// Scores for `src`, checked against the `score` stage's table.
fn fresh_scores(run: &Run, src: &TransitionDataset, tar: &TransitionDataset) -> Result<ScoreTable> {
    let cfg = &run.cfg;
    let stage = run.upstream(SCORES_FILE)?;
    let path = run.out.join(SCORES_FILE);
    verify_input(&stage, &cfg.src()?)?;
    verify_input(&stage, &cfg.tar()?)?;
    ensure_same_config(&stage, cfg, &["k"], &path)?;
    // The CSV keeps 9 digits; recompute the exact table and check that it
    // prints identically.
    let table = GapScorer::new(src, tar, cfg.k()?)?.score_members(src)?;
    let recorded = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if recorded != tables::scores_text(&table, 0, 0..table.len()) {
        return Err(Error::stale(&path, "recomputed scores differ from the recorded table"));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSummary {
    pub steps: usize,
    pub first_holdout_loss: f64,
    pub last_holdout_loss: f64,
}

pub fn train_diffusion(cfg: &RunConfig) -> Result<DiffusionSummary> {
    let mut run = Run::start(cfg, "train-diffusion")?;
    let src = run.load(&cfg.src()?, Origin::SourceReal)?;
    let tar = run.load(&cfg.tar()?, Origin::Target)?;
    let scores = fresh_scores(&run, &src, &tar)?;
    let dcfg = cfg.diffusion()?;
    let (model, log) = train_denoiser(&src, &scores, &dcfg, derive_seed(cfg.seed()?, SEED_DIFFUSION))?;
    checkpoint::save_denoiser(&model, &run.model_output(MODEL_FILE))?;
    tables::write_train_log(&run.output("diffusion_log.csv"), &log)?;
    run.finish()?;
    Ok(DiffusionSummary {
        steps: model.trained_steps,
        first_holdout_loss: log.first().map_or(f64::NAN, |l| l.holdout_loss),
        last_holdout_loss: log.last().map_or(f64::NAN, |l| l.holdout_loss),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub count: usize,
    pub mean_weight_real: f64,
    pub mean_weight_generated: f64,
    pub mean_condition: f64,
}

/// Checks that a model-stage artifact was built from the current datasets.
fn check_lineage(run: &Run, file: &str) -> Result<StageRecord> {
    let stage = run.upstream(file)?;
    verify_input(&stage, &run.cfg.src()?)?;
    verify_input(&stage, &run.cfg.tar()?)?;
    ensure_same_config(&stage, &run.cfg, &["k"], &run.out.join(file))?;
    Ok(stage)
}

pub fn generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let gcfg = cfg.guidance()?;
    let mut run = Run::start(cfg, "generate")?;
    let src = run.load(&cfg.src()?, Origin::SourceReal)?;
    let tar = run.load(&cfg.tar()?, Origin::Target)?;
    check_lineage(&run, MODEL_FILE)?;
    run.upstream(&format!("{MODEL_FILE}.json"))?;
    let model = checkpoint::load_denoiser(&run.out.join(MODEL_FILE))?;
    let scores = GapScorer::new(&src, &tar, cfg.k()?)?.score_members(&src)?;
    let aug = augment_source(&src, &tar, &scores, &model, &gcfg, derive_seed(cfg.seed()?, SEED_GENERATE))?;
    let n = src.len();
    let generated = aug.dataset.select(&(n..aug.dataset.len()).collect::<Vec<_>>());
    save_dataset(&generated, &run.output(GENERATED_FILE))?;
    let text = tables::scores_text(&aug.scores, n, n..aug.scores.len());
    let path = run.output("generated_scores.csv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = GenerateSummary {
        count: generated.len(),
        mean_weight_real: mean(&aug.scores.weight[..n]),
        mean_weight_generated: mean(&aug.scores.weight[n..]),
        mean_condition: mean(&aug.conditions),
    };
    write_json(&summary, &run.output("generate_summary.json"))?;
    run.finish()?;
    Ok(summary)
}

fn generated_path(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    Ok(match cfg.get("generated") {
        "none" => None,
        "auto" => Some(cfg.out()?.join(GENERATED_FILE)).filter(|p| p.exists()),
        p => Some(PathBuf::from(p)),
    })
}

/// Real source rows followed by generated ones, with their score table.
pub fn augmented_source(
    src: &TransitionDataset,
    tar: &TransitionDataset,
    generated: Option<&TransitionDataset>,
    k: usize,
) -> Result<(TransitionDataset, ScoreTable)> {
    let scorer = GapScorer::new(src, tar, k)?;
    let table = scorer.score_members(src)?;
    match generated {
        None => Ok((src.clone(), table)),
        Some(g) => {
            let (rho, floored) = scorer.external_rho(g)?;
            let mut g = g.clone();
            g.set_origin(Origin::SourceGenerated);
            let all = concat(src, &g)?;
            let ext = table.extended(&rho, floored, &all)?;
            Ok((all, ext))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub mode: String,
    pub steps: usize,
    pub source_rows: usize,
    pub generated_rows: usize,
    pub mean_omega: f64,
    pub frac_selected: f64,
    pub final_eval_ns: Option<f64>,
}

fn reference_for(run: &Run) -> Result<Option<ReferenceFile>> {
    let path = run.out.join(REFERENCE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    run.upstream(REFERENCE_FILE)?;
    let r: ReferenceFile = read_json(&path)?;
    if r.target_spec != spec_map(&run.cfg.target_spec()?) {
        return Err(Error::stale(&path, "reference returns were computed for a different target environment"));
    }
    Ok(Some(r))
}

pub fn train_policy(cfg: &RunConfig) -> Result<PolicySummary> {
    let mode = cfg.mode()?;
    let icfg = cfg.iql()?;
    let steps: usize = cfg.parsed("rl.steps")?;
    let seed = cfg.seed()?;
    let mut run = Run::start(cfg, "train-policy")?;
    let src = run.load(&cfg.src()?, Origin::SourceReal)?;
    let tar = run.load(&cfg.tar()?, Origin::Target)?;
    let generated = match generated_path(cfg)? {
        Some(p) => {
            if p == run.out.join(GENERATED_FILE) {
                check_lineage(&run, GENERATED_FILE)?;
            }
            Some(run.load(&p, Origin::SourceGenerated)?)
        }
        None => None,
    };
    let (all, table) = augmented_source(&src, &tar, generated.as_ref(), cfg.k()?)?;
    let rows = match mode {
        Mode::Dmc => SourceRows::from_scores(&all, &table, icfg.xi)?,
        Mode::Pooled => SourceRows::Pooled(&all),
        Mode::TargetOnly => SourceRows::None,
    };
    let cvae = if icfg.lambda > 0.0 {
        let (m, _) = train_cvae(&tar, &cfg.cvae()?, derive_seed(seed, SEED_BEHAVIOR))?;
        checkpoint::save_cvae(&m, &run.model_output(BEHAVIOR_FILE))?;
        Some(m)
    } else {
        None
    };
    let reference = reference_for(&run)?;
    let tar_spec = cfg.target_spec()?;
    let eval_episodes: usize = cfg.parsed("rl.eval_episodes")?;
    let eval_seed: u64 = cfg.parsed("eval.seed")?;
    let mut evaluator = |b: &PolicyBundle| -> dmc_core::Result<(f64, f64)> {
        let r = reference.as_ref().unwrap().reference();
        let e = env::evaluate(&tar_spec, &MeanActionPolicy::new(b)?, &r, eval_episodes, eval_seed)?;
        Ok((e.mean_return, e.normalized_score))
    };
    let eval: Option<dmc_core::iql::EvalFn<'_>> =
        if reference.is_some() && eval_episodes > 0 && tar.state_dim() == env::STATE_DIM && tar.action_dim() == env::ACTION_DIM {
            Some(&mut evaluator)
        } else {
            None
        };
    let (mean_omega, frac_selected) = rows.selection_summary();
    let (bundle, metrics) = iql::train(&tar, rows, cvae.as_ref(), &icfg, steps, derive_seed(seed, SEED_POLICY), eval)?;
    checkpoint::save_policy(&bundle, &run.model_output(POLICY_FILE))?;
    tables::write_metrics(&run.output(METRICS_FILE), &metrics)?;
    run.finish()?;
    Ok(PolicySummary {
        mode: cfg.get("rl.mode").to_string(),
        steps: bundle.steps,
        source_rows: if mode == Mode::TargetOnly { 0 } else { all.len() },
        generated_rows: generated.as_ref().map_or(0, |g| g.len()),
        mean_omega,
        frac_selected,
        final_eval_ns: metrics.last().and_then(|m| m.eval_ns),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub episodes: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub std_error: f64,
    pub normalized_score: f64,
}

pub fn evaluate(cfg: &RunConfig, expert: bool) -> Result<EvalSummary> {
    let mut run = Run::start(cfg, if expert { "evaluate-expert" } else { "evaluate" })?;
    let reference = reference_for(&run)?
        .ok_or_else(|| Error::Config(format!("{} missing; run `collect` first", run.out.join(REFERENCE_FILE).display())))?;
    let spec = cfg.target_spec()?;
    let episodes: usize = cfg.parsed("eval.episodes")?;
    let seed: u64 = cfg.parsed("eval.seed")?;
    let e = if expert {
        run.upstream(EXPERT_FILE)?;
        let f: ExpertFile = read_json(&run.out.join(EXPERT_FILE))?;
        let c = LinearController::from(&f.target);
        env::evaluate(&spec, &c as &dyn Policy, &reference.reference(), episodes, seed)?
    } else {
        run.upstream(POLICY_FILE)?;
        run.upstream(&format!("{POLICY_FILE}.json"))?;
        let b = checkpoint::load_policy(&run.out.join(POLICY_FILE))?;
        env::evaluate(&spec, &MeanActionPolicy::new(&b)?, &reference.reference(), episodes, seed)?
    };
    let summary = EvalSummary {
        policy: if expert { "expert" } else { "policy" }.into(),
        episodes,
        seed,
        mean_return: e.mean_return,
        std_error: e.std_error,
        normalized_score: e.normalized_score,
    };
    let name = if expert { "eval_expert.json" } else { "eval.json" };
    write_json(&summary, &run.output(name))?;
    run.finish()?;
    Ok(summary)
}

/// Largest fraction of `values` inside any closed window of `width`.
pub fn densest_band(values: &[f64], width: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut best = 0;
    let mut j = 0;
    for i in 0..v.len() {
        if j < i {
            j = i;
        }
        while j + 1 < v.len() && v[j + 1] - v[i] <= width {
            j += 1;
        }
        best = best.max(j + 1 - i);
    }
    best as f64 / v.len().max(1) as f64
}

/// Number of the ten 0.1-wide bins on `[0, 1]` holding at least `min_frac`
/// of `values`.
pub fn occupied_deciles(values: &[f64], min_frac: f64) -> usize {
    let mut c = [0usize; 10];
    for &v in values {
        c[((v * 10.0).floor().max(0.0) as usize).min(9)] += 1;
    }
    c.iter().filter(|&&n| n as f64 >= min_frac * values.len() as f64).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub bins: usize,
    pub self_exclusion: String,
    pub mean_log_nn_src_to_tar: f64,
    pub mean_log_nn_tar_to_tar: f64,
    /// Densest 0.1-wide band of classifier target-probabilities.
    pub classifier_band_fraction_sa: f64,
    pub classifier_band_fraction_sas: f64,
    /// Deciles of the gap weight holding at least 1% of source rows.
    pub knn_weight_deciles: usize,
    pub generated_rows: usize,
    pub mean_rho_hat_real: f64,
    pub mean_rho_hat_generated: Option<f64>,
}

pub fn diagnose(cfg: &RunConfig) -> Result<DiagnoseSummary> {
    let bins: usize = cfg.parsed("diagnose.bins")?;
    let mut run = Run::start(cfg, "diagnose")?;
    let src = run.load(&cfg.src()?, Origin::SourceReal)?;
    let tar = run.load(&cfg.tar()?, Origin::Target)?;
    let generated = match generated_path(cfg)? {
        Some(p) => {
            if p == run.out.join(GENERATED_FILE) {
                check_lineage(&run, GENERATED_FILE)?;
            }
            Some(run.load(&p, Origin::SourceGenerated)?)
        }
        None => None,
    };
    let h = nn_distance_histogram(&src, &tar, bins)?;
    tables::write_histogram(&run.output("nn_hist.csv"), ["count_src", "count_tar"], &h.edges, &h.src_counts, &h.tar_counts)?;

    let cls = classifier_score(&src, &tar, &cfg.classifier()?, derive_seed(cfg.seed()?, SEED_DIAGNOSE))?;
    let (edges, a, b) = tables::fixed_histogram2(&cls.p_sa, &cls.p_sas, 10, 0.0, 1.0);
    tables::write_histogram(&run.output("classifier_hist.csv"), ["count_p_sa", "count_p_sas"], &edges, &a, &b)?;

    let (all, table) = augmented_source(&src, &tar, generated.as_ref(), cfg.k()?)?;
    let n = src.len();
    let real = &table.rho_hat[..n];
    let gen = &table.rho_hat[n..all.len()];
    let (edges, a, b) = tables::histogram2(real, gen, bins);
    tables::write_histogram(&run.output("gap_hist.csv"), ["count_real", "count_generated"], &edges, &a, &b)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = DiagnoseSummary {
        bins,
        self_exclusion: if h.self_matched {
            "source and target are identical: both sides skip one zero-distance match (the query row)".into()
        } else {
            "target-to-target distances skip one zero-distance match (the query row); source-to-target distances exclude nothing".into()
        },
        mean_log_nn_src_to_tar: mean(&h.src_log_dist),
        mean_log_nn_tar_to_tar: mean(&h.tar_log_dist),
        classifier_band_fraction_sa: densest_band(&cls.p_sa, 0.1),
        classifier_band_fraction_sas: densest_band(&cls.p_sas, 0.1),
        knn_weight_deciles: occupied_deciles(&table.weight[..n], 0.01),
        generated_rows: gen.len(),
        mean_rho_hat_real: mean(real),
        mean_rho_hat_generated: if gen.is_empty() { None } else { Some(mean(gen)) },
    };
    write_json(&summary, &run.output("diagnose.json"))?;
    run.finish()?;
    Ok(summary)
}

/// Runs one recorded command by name and returns a printable summary.
pub fn run_command(command: &str, cfg: &RunConfig) -> Result<String> {
    let json = |v: serde_json::Result<String>| v.map_err(|e| Error::Other(e.to_string()));
    match command {
        "collect" => json(serde_json::to_string_pretty(&collect(cfg)?)),
        "score" => json(serde_json::to_string_pretty(&score(cfg)?)),
        "train-diffusion" => json(serde_json::to_string_pretty(&train_diffusion(cfg)?)),
        "generate" => json(serde_json::to_string_pretty(&generate(cfg)?)),
        "train-policy" => json(serde_json::to_string_pretty(&train_policy(cfg)?)),
        "evaluate" => json(serde_json::to_string_pretty(&evaluate(cfg, false)?)),
        "evaluate-expert" => json(serde_json::to_string_pretty(&evaluate(cfg, true)?)),
        "diagnose" => json(serde_json::to_string_pretty(&diagnose(cfg)?)),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerunReport {
    /// `(stage, file, matches)` for every recorded output.
    pub outputs: Vec<(String, String, bool)>,
}

impl RerunReport {
    pub fn all_match(&self) -> bool {
        self.outputs.iter().all(|o| o.2)
    }
}

/// Replays every stage of `manifest` into `out`. Inputs that lived in the
/// original output directory are taken from `out` instead, so a chain that
/// starts with `collect` replays end to end.
pub fn rerun(manifest: &Path, out: &Path) -> Result<RerunReport> {
    let m = Manifest::load(manifest)?;
    let old_out = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let old_canon = std::fs::canonicalize(&old_out).map_err(|e| Error::io(&old_out, e))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if std::fs::canonicalize(out).map_err(|e| Error::io(out, e))? == old_canon {
        return Err(Error::Config("rerun needs a different output directory".into()));
    }
    let mut stages: Vec<&StageRecord> = m.stages.iter().collect();
    stages.sort_by_key(|s| COMMANDS.iter().position(|c| *c == s.command).unwrap_or(COMMANDS.len()));
    let mut report = RerunReport { outputs: Vec::new() };
    for stage in stages {
        let mut cfg = RunConfig::from_values(&stage.config)?;
        cfg.set("out", &out.display().to_string())?;
        for key in ["src", "tar", "generated"] {
            let v = cfg.get(key).to_string();
            if v.is_empty() || v == "auto" || v == "none" {
                continue;
            }
            let p = PathBuf::from(&v);
            let canon = std::fs::canonicalize(&p).unwrap_or_else(|_| p.clone());
            if let (Ok(rel), true) = (canon.strip_prefix(&old_canon), canon.starts_with(&old_canon)) {
                cfg.set(key, &out.join(rel).display().to_string())?;
            }
        }
        run_command(&stage.command, &cfg)?;
        for (file, want) in &stage.outputs {
            let got = sha256_file(&out.join(file))?;
            report.outputs.push((stage.command.clone(), file.clone(), &got == want));
        }
    }
    Ok(report)
}

pub fn sidecar(path: &Path) -> PathBuf {
    sidecar_path(path)
}

/// Formats a float the way every CSV output does.
pub fn fmt(v: f64) -> String {
    sig9(v)
}
