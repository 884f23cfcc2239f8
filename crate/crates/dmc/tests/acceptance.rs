//! Acceptance checks. Prints one PASS/FAIL line per criterion with the
//! measured value and the pinned tolerance.
//!
//! `ACCEPTANCE_ONLY=1,3,5` runs a subset. The process exits 0 regardless of
//! the outcome unless `ACCEPTANCE_STRICT=1` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use dmc::formats::{
    decode_dataset, decode_networks, encode_dataset, encode_networks, load_dataset, load_networks, save_dataset, save_networks,
};
use dmc::pipeline::{self, densest_band, occupied_deciles};
use dmc::RunConfig;
use dmc_core::cvae::{train_cvae, CvaeConfig, CvaeModel};
use dmc_core::dataset::{Origin, TransitionDataset};
use dmc_core::diffusion::{augment_source, guided_noise, train_denoiser, ConditionSampler, DiffusionConfig, GuidanceConfig};
use dmc_core::env::{self, CemConfig, EnvSpec, EvalReference, Quality};
use dmc_core::iql::{train, IqlConfig, MeanActionPolicy, PolicyBundle, SourceRows, Trainer};
use dmc_core::knn::{classifier_score, kl_estimate, score_source, sq_dist, ClassifierConfig, GapScorer, ScoreTable};
use dmc_core::rng::{normal_f32, normal_f64, rng_from_seed, Rng};
use dmc_core::stats::{mean, mean_and_se, rank_sum_less};
use dmc_core::tensor::{Activation, Matrix, Mlp};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// Shared fixtures

/// Point-mass source/target pair: experts, references and medium datasets.
struct PointMass {
    tar_spec: EnvSpec,
    src: TransitionDataset,
    tar: TransitionDataset,
    r_tar: EvalReference,
}

fn point_mass(src_spec: &EnvSpec, n_src: usize, n_tar: usize, seed: u64) -> PointMass {
    let tar_spec = src_spec.gravity_shifted();
    let cem = CemConfig::default();
    let e_src = env::train_expert(src_spec, &cem, seed).unwrap();
    let e_tar = env::train_expert(&tar_spec, &cem, seed + 100).unwrap();
    let r_src = EvalReference::compute(src_spec, &e_src, EvalReference::MIN_EPISODES, seed).unwrap();
    let r_tar = EvalReference::compute(&tar_spec, &e_tar, EvalReference::MIN_EPISODES, seed).unwrap();
    let src = env::collect_dataset(src_spec, Quality::Medium, n_src, seed, Some(&e_src), &r_src, Origin::SourceReal).unwrap().dataset;
    let tar = env::collect_dataset(&tar_spec, Quality::Medium, n_tar, seed + 1, Some(&e_tar), &r_tar, Origin::Target).unwrap().dataset;
    PointMass { tar_spec, src, tar, r_tar }
}

/// Rows with `S` state and `A` action coordinates whose gap features
/// `s ⊕ a ⊕ s'` are exactly the given points.
fn from_features(points: &[Vec<f64>], s: usize, a: usize, origin: Origin) -> TransitionDataset {
    let mut ds = TransitionDataset::with_capacity(s, a, points.len());
    for p in points {
        let f: Vec<f32> = p.iter().map(|&v| v as f32).collect();
        ds.push(&f[..s], &f[s..s + a], 0.0, &f[s + a..], false, origin).unwrap();
    }
    ds
}

// ---------------------------------------------------------------------------
// 1. KL oracle

fn gaussian_points(n: usize, shift: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut p: Vec<f64> = (0..4).map(|_| normal_f64(rng)).collect();
            p[0] += shift;
            p
        })
        .collect()
}

fn kl_oracle() -> Outcome {
    const N: usize = 10_000;
    const TRUE_KL: f64 = 0.5;
    const BAND: (f64, f64) = (0.4, 0.6);
    const SAME_TOL: f64 = 0.05;
    const MIN_SEEDS: usize = 4;
    const MAX_SECS: f64 = 10.0;
    let mut inside = 0;
    let (mut shifted, mut same) = (Vec::new(), Vec::new());
    let mut slowest = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = rng_from_seed(1000 + seed);
        let src = from_features(&gaussian_points(N, 0.0, &mut rng), 1, 2, Origin::SourceReal);
        let tar = from_features(&gaussian_points(N, 1.0, &mut rng), 1, 2, Origin::Target);
        let t = Instant::now();
        let est = kl_estimate(&src, &tar, 5).unwrap();
        slowest = slowest.max(secs(t.elapsed()));
        inside += usize::from((BAND.0..=BAND.1).contains(&est));
        shifted.push(est);

        let pool = gaussian_points(2 * N, 0.0, &mut rng);
        let a = from_features(&pool[..N], 1, 2, Origin::SourceReal);
        let b = from_features(&pool[N..], 1, 2, Origin::Target);
        let t = Instant::now();
        same.push(kl_estimate(&a, &b, 5).unwrap());
        slowest = slowest.max(secs(t.elapsed()));
    }
    let worst_same = same.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    outcome(
        inside >= MIN_SEEDS && worst_same <= SAME_TOL && slowest <= MAX_SECS,
        format!(
            "shifted {} (true {TRUE_KL}, {inside}/5 in [{}, {}], need {MIN_SEEDS}); same-distribution max |est| {worst_same:.4} (≤ {SAME_TOL}); slowest estimate {slowest:.2}s (≤ {MAX_SECS}s)",
            fmt_list(&shifted),
            BAND.0,
            BAND.1
        ),
    )
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// 2. Throughput

/// Two independent point masses side by side: 8-D state, 4-D action, gap
/// features of width 20.
fn twin_point_mass(spec: &EnvSpec, n: usize, seed: u64, origin: Origin) -> TransitionDataset {
    let expert = env::train_expert(spec, &CemConfig::default(), seed).unwrap();
    let reference = EvalReference::compute(spec, &expert, EvalReference::MIN_EPISODES, seed).unwrap();
    let a = env::collect_dataset(spec, Quality::Medium, n, seed + 1, Some(&expert), &reference, origin).unwrap().dataset;
    let b = env::collect_dataset(spec, Quality::Medium, n, seed + 2, Some(&expert), &reference, origin).unwrap().dataset;
    let mut ds = TransitionDataset::with_capacity(8, 4, n);
    for i in 0..n {
        let (x, y) = (a.get(i), b.get(i));
        let cat = |p: &[f32], q: &[f32]| -> Vec<f32> { p.iter().chain(q).copied().collect() };
        ds.push(&cat(x.state, y.state), &cat(x.action, y.action), x.reward + y.reward, &cat(x.next_state, y.next_state), false, origin)
            .unwrap();
    }
    ds
}

fn throughput() -> Outcome {
    const N_SRC: usize = 1_000_000;
    const N_TAR: usize = 5_000;
    const MAX_SECS: f64 = 60.0;
    let spec = EnvSpec::point_mass();
    let src = twin_point_mass(&spec, N_SRC, 1, Origin::SourceReal);
    let tar = twin_point_mass(&spec.gravity_shifted(), N_TAR, 2, Origin::Target);
    assert_eq!(src.feature_dim(), 20);
    let t = Instant::now();
    let table = score_source(&src, &tar, 5).unwrap();
    let took = secs(t.elapsed());
    assert_eq!(table.len(), N_SRC);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(took <= MAX_SECS, format!("{N_SRC} x {N_TAR} rows, d=20, k=5 scored in {took:.1}s (≤ {MAX_SECS}s) on {threads} thread(s)"))
}

// ---------------------------------------------------------------------------
// 3. Exactness

struct Instance {
    src: TransitionDataset,
    tar: TransitionDataset,
    k: usize,
}

fn log_uniform(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    let v = ((lo as f64).ln() + rng.random::<f64>() * ((hi as f64).ln() - (lo as f64).ln())).exp();
    (v.round() as usize).clamp(lo, hi)
}

/// Random instance: Gaussian, grid-quantized (many ties), anisotropic or
/// clustered points, with exact duplicates inside and across the two sets.
fn instance(rng: &mut Rng) -> Instance {
    let d = rng.random_range(2..=32usize);
    let k = rng.random_range(1..=8usize);
    let n = log_uniform(rng, k + 1, 10_000);
    let m = log_uniform(rng, k, 10_000);
    let kind = rng.random_range(0..4u32);
    let scales: Vec<f64> = (0..d).map(|_| if kind == 2 { 10f64.powf(rng.random_range(-3.0..3.0)) } else { 1.0 }).collect();
    let centers: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| 5.0 * normal_f64(rng)).collect()).collect();
    let point = |rng: &mut Rng| -> Vec<f64> {
        (0..d)
            .map(|j| {
                let base = if kind == 3 { centers[rng.random_range(0..5)][j] } else { 0.0 };
                let v = base + normal_f64(rng) * scales[j];
                if kind == 1 {
                    (v * 2.0).round() / 2.0
                } else {
                    v
                }
            })
            .collect()
    };
    let dup = rng.random_range(0.0..0.2);
    let mut src: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let p = if !src.is_empty() && rng.random::<f64>() < dup { src[rng.random_range(0..src.len())].clone() } else { point(rng) };
        src.push(p);
    }
    let mut tar: Vec<Vec<f64>> = Vec::with_capacity(m);
    for _ in 0..m {
        let p = if rng.random::<f64>() < dup { src[rng.random_range(0..n)].clone() } else { point(rng) };
        tar.push(p);
    }
    // Gap features are s ⊕ a ⊕ s' with |s| = |s'|.
    let s = d / 2;
    let a = d - 2 * s;
    let (s, a) = if s == 0 { (1, d - 2) } else { (s, a) };
    Instance { src: from_features(&src, s, a, Origin::SourceReal), tar: from_features(&tar, s, a, Origin::Target), k }
}

fn kth_smallest(mut v: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Independent double-loop `rho`: own two-pass z-normalization, full
/// distance lists, own-index exclusion on the source side.
fn rho_oracle(src: &TransitionDataset, tar: &TransitionDataset, k: usize) -> Vec<f64> {
    let d = src.feature_dim();
    let feats = |ds: &TransitionDataset| -> Vec<Vec<f64>> { (0..ds.len()).map(|i| ds.gap_features(i).map(f64::from).collect()).collect() };
    let (fs, ft) = (feats(src), feats(tar));
    let total = (fs.len() + ft.len()) as f64;
    let mut mu = vec![0.0; d];
    for p in fs.iter().chain(&ft) {
        for j in 0..d {
            mu[j] += p[j] / total;
        }
    }
    let mut sd = vec![0.0; d];
    for p in fs.iter().chain(&ft) {
        for j in 0..d {
            sd[j] += (p[j] - mu[j]).powi(2) / total;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v.sqrt() < 1e-8 { 1.0 } else { v.sqrt() }).collect();
    let z = |ps: &[Vec<f64>]| -> Vec<Vec<f64>> { ps.iter().map(|p| (0..d).map(|j| (p[j] - mu[j]) / sd[j]).collect()).collect() };
    let (zs, zt) = (z(&fs), z(&ft));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let ln = |v: f64| v.max(1e-12).ln();
    zs.iter()
        .enumerate()
        .map(|(i, q)| {
            let to_t = kth_smallest(zt.iter().map(|p| dist(q, p)).collect(), k);
            let to_s = kth_smallest(zs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| dist(q, p)).collect(), k);
            ln(to_t) - ln(to_s)
        })
        .collect()
}

fn exactness() -> Outcome {
    const INSTANCES: usize = 500;
    const RHO_TOL: f64 = 1e-9;
    let mut rng = rng_from_seed(3);
    let (mut dist_mismatch, mut rho_worst, mut rows) = (0usize, 0.0f64, 0usize);
    for _ in 0..INSTANCES {
        let inst = instance(&mut rng);
        let scorer = GapScorer::new(&inst.src, &inst.tar, inst.k).unwrap();
        let (to_tar, to_src) = scorer.member_distances().unwrap();
        let d = inst.src.feature_dim();
        let ps = scorer.norm().normalize_dataset(&inst.src).unwrap();
        let pt = scorer.norm().normalize_dataset(&inst.tar).unwrap();
        for (i, q) in ps.chunks_exact(d).enumerate() {
            let bt = kth_smallest(pt.chunks_exact(d).map(|p| sq_dist(q, p)).collect(), inst.k).sqrt();
            let bs =
                kth_smallest(ps.chunks_exact(d).enumerate().filter(|&(j, _)| j != i).map(|(_, p)| sq_dist(q, p)).collect(), inst.k).sqrt();
            dist_mismatch += usize::from(bt.to_bits() != to_tar[i].to_bits()) + usize::from(bs.to_bits() != to_src[i].to_bits());
        }
        let table = scorer.score_members(&inst.src).unwrap();
        for (a, b) in table.rho.iter().zip(rho_oracle(&inst.src, &inst.tar, inst.k)) {
            rho_worst = rho_worst.max((a - b).abs());
        }
        rows += inst.src.len();
    }
    outcome(
        dist_mismatch == 0 && rho_worst <= RHO_TOL,
        format!("{INSTANCES} instances, {rows} source rows: {dist_mismatch} distances differ from brute force (need 0); max |rho − oracle| {rho_worst:.2e} (≤ {RHO_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// 4. Gradients

const FD_STEP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

/// f64 forward over the flat layout (per layer `in × out` weights then
/// `out` biases, ReLU between layers) plus the ReLU on/off pattern.
fn forward_f64(sizes: &[usize], params: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, Vec<bool>) {
    let mut act = x.to_vec();
    let mut pattern = Vec::new();
    let mut off = 0;
    for (l, w) in sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let (weights, bias) = (&params[off..off + n_in * n_out], &params[off + n_in * n_out..off + n_in * n_out + n_out]);
        off += n_in * n_out + n_out;
        let mut next = vec![0.0; rows * n_out];
        for r in 0..rows {
            for j in 0..n_out {
                let mut s = bias[j];
                for i in 0..n_in {
                    s += act[r * n_in + i] * weights[i * n_out + j];
                }
                if l + 2 < sizes.len() {
                    pattern.push(s > 0.0);
                    s = s.max(0.0);
                }
                next[r * n_out + j] = s;
            }
        }
        act = next;
    }
    (act, pattern)
}

/// Norm-wise relative error `‖g − ĝ‖ / ‖ĝ‖` of the analytic parameter and
/// input gradients of a random scalar projection of the output, over all
/// coordinates whose perturbation stays on one side of every ReLU kink.
fn grad_error(sizes: &[usize], rows: usize, seed: u64) -> (f64, usize, usize) {
    let mut rng = rng_from_seed(seed);
    let net = Mlp::new(sizes, Activation::Relu, &mut rng).unwrap();
    let (n_in, n_out) = (sizes[0], *sizes.last().unwrap());
    let x = Matrix::from_fn(rows, n_in, |_, _| normal_f32(&mut rng));
    let up = Matrix::from_fn(rows, n_out, |_, _| normal_f32(&mut rng));
    let back = net.backward(&net.forward_tape(&x).unwrap(), &up).unwrap();
    let p64: Vec<f64> = net.params().iter().map(|&v| v as f64).collect();
    let x64: Vec<f64> = x.as_slice().iter().map(|&v| v as f64).collect();
    let u64_: Vec<f64> = up.as_slice().iter().map(|&v| v as f64).collect();
    let loss = |p: &[f64], x: &[f64]| {
        let (out, pat) = forward_f64(sizes, p, x, rows);
        (out.iter().zip(&u64_).map(|(a, b)| a * b).sum::<f64>(), pat)
    };
    let base = loss(&p64, &x64).1;
    let (mut num, mut den, mut kinks, mut checked) = (0.0, 0.0, 0, 0);
    let mut fd = |analytic: f32, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
        if plus.1 != base || minus.1 != base {
            kinks += 1;
            return;
        }
        let g = (plus.0 - minus.0) / (2.0 * FD_STEP);
        num += (analytic as f64 - g).powi(2);
        den += g * g;
        checked += 1;
    };
    let mut p = p64.clone();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let plus = loss(&p, &x64);
        p[i] = orig - FD_STEP;
        let minus = loss(&p, &x64);
        p[i] = orig;
        fd(back.grads.0[i], plus, minus);
    }
    let mut xp = x64.clone();
    for i in 0..xp.len() {
        let orig = xp[i];
        xp[i] = orig + FD_STEP;
        let plus = loss(&p64, &xp);
        xp[i] = orig - FD_STEP;
        let minus = loss(&p64, &xp);
        xp[i] = orig;
        fd(back.input_grad.as_slice()[i], plus, minus);
    }
    ((num / den).sqrt(), checked, kinks)
}

fn gradients() -> Outcome {
    const S: usize = 4;
    const A: usize = 2;
    const LATENT: usize = 4;
    const GEN: usize = 2 * S + A + 1;
    let archs: [(&str, Vec<usize>); 8] = [
        ("denoiser", vec![GEN + 3, 64, 64, GEN]),
        ("q", vec![S + A, 64, 64, 1]),
        ("v", vec![S, 64, 64, 1]),
        ("policy", vec![S, 64, 64, A]),
        ("cvae-encoder", vec![S + A, 64, 64, 2 * LATENT]),
        ("cvae-decoder", vec![S + LATENT, 64, 64, A]),
        ("classifier-sa", vec![S + A, 64, 64, 1]),
        ("classifier-sas", vec![2 * S + A, 64, 64, 1]),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, (name, sizes)) in archs.iter().enumerate() {
        let (e, checked, kinks) = grad_error(sizes, 4, 400 + i as u64);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e} ({checked} coords, {kinks} kinks skipped)"));
    }
    outcome(worst <= GRAD_TOL, format!("worst relative error {worst:.2e} (≤ {GRAD_TOL:.0e}); {}", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 5. Guidance algebra

fn small_denoiser() -> dmc_core::diffusion::DenoiserModel {
    let pm = point_mass(&EnvSpec::point_mass(), 1000, 200, 5);
    let table = score_source(&pm.src, &pm.tar, 5).unwrap();
    let cfg = DiffusionConfig { hidden: vec![64, 64], train_steps: 200, log_every: 100, ..Default::default() };
    train_denoiser(&pm.src, &table, &cfg, 5).unwrap().0
}

fn guidance_algebra() -> Outcome {
    const LIN_REL_TOL: f64 = 1e-6;
    let model = small_denoiser();
    let d = model.data_dim();
    let mut rng = rng_from_seed(55);
    let (mut exact_fail, mut lin_worst) = (0usize, 0.0f64);
    for trial in 0..50 {
        let rows = 16;
        let x = Matrix::from_fn(rows, d, |_, _| 3.0 * normal_f32(&mut rng));
        let sigma = model.schedule.sigma(1 + trial % model.schedule.steps());
        let cond: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
        let est = model.noise_estimates(&x, sigma, &cond).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        exact_fail += usize::from(bits(&guided_noise(&est, 0.0)) != bits(&est.uncond));
        exact_fail += usize::from(bits(&guided_noise(&est, 1.0)) != bits(&est.cond));
        for w in [0.0f32, 0.5, 1.0, 1.5] {
            let g = guided_noise(&est, w);
            for ((&o, &c), &u) in g.as_slice().iter().zip(est.cond.as_slice()).zip(est.uncond.as_slice()) {
                let (c, u, w) = (c as f64, u as f64, w as f64);
                let want = u + w * (c - u);
                let rel = (o as f64 - want).abs() / (c.abs() + u.abs()).max(1e-30) / (1.0 + w);
                lin_worst = lin_worst.max(rel);
            }
        }
    }
    // End to end: guidance 0 reproduces the unconditional sampler bit for bit.
    let cond: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
    let at0 = model.sample_normalized(Some(&cond), cond.len(), 0.0, 18, 9).unwrap();
    let uncond = model.sample_normalized(None, cond.len(), 0.0, 18, 9).unwrap();
    let sampler_same = at0.iter().zip(&uncond).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        exact_fail == 0 && lin_worst <= LIN_REL_TOL && sampler_same,
        format!(
            "{exact_fail} bit mismatches at w ∈ {{0, 1}} (need 0); worst linearity error {lin_worst:.1e} relative (≤ {LIN_REL_TOL:.0e}) at w ∈ {{0, .5, 1, 1.5}}; guidance-0 sampler equals unconditional: {sampler_same}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Guidance effectiveness

fn guidance_effect() -> Outcome {
    const SAMPLES: usize = 2000;
    const P_MAX: f64 = 0.01;
    const MAX_SECS: f64 = 15.0 * 60.0;
    let t = Instant::now();
    let pm = point_mass(&EnvSpec::point_mass(), 10_000, 5000, 6);
    let table = score_source(&pm.src, &pm.tar, 5).unwrap();
    let (model, _) = train_denoiser(&pm.src, &table, &DiffusionConfig::default(), 6).unwrap();
    let g = GuidanceConfig::default();
    let sampler = ConditionSampler::new(&table, g.kappa).unwrap();
    let mut rng = rng_from_seed(61);
    let cond: Vec<f64> = (0..SAMPLES).map(|_| sampler.draw(&mut rng)).collect();
    let guided = model.guided_sample(&cond, g.guidance, g.sampler_steps, 62).unwrap();
    let unguided = model.sample_unconditional(SAMPLES, g.sampler_steps, 63).unwrap();
    let scorer = GapScorer::new(&pm.src, &pm.tar, 5).unwrap();
    let (rho_g, _) = scorer.external_rho(&guided).unwrap();
    let (rho_u, _) = scorer.external_rho(&unguided).unwrap();
    let test = rank_sum_less(&rho_g, &rho_u).unwrap();
    let weight = |r: &[f64]| mean(&r.iter().map(|v| 1.0 / (1.0 + (v - table.rho_min).max(0.0))).collect::<Vec<_>>());
    let (w_guided, w_real) = (weight(&rho_g), mean(&table.weight));
    let took = secs(t.elapsed());
    outcome(
        test.p_value < P_MAX && w_guided > w_real && took <= MAX_SECS,
        format!(
            "guided gaps lower than unguided: p = {:.2e} (< {P_MAX}); mean rho guided {:.3} vs unguided {:.3}; mean w guided {w_guided:.3} vs real {w_real:.3}; {took:.0}s (≤ {MAX_SECS}s)",
            test.p_value,
            mean(&rho_g),
            mean(&rho_u)
        ),
    )
}

// ---------------------------------------------------------------------------
// 7, 8. Weighted IQL

fn params_equal(a: &PolicyBundle, b: &PolicyBundle) -> bool {
    a == b
}

fn unit_weights_match_pooled() -> Outcome {
    const STEPS: usize = 1000;
    let pm = point_mass(&EnvSpec::point_mass(), 4000, 1000, 7);
    let table = ScoreTable::from_rho(5, vec![0.0; pm.src.len()], 0.0, 0, pm.src.fingerprint()).unwrap();
    let cfg = IqlConfig { lambda: 0.0, xi: 0.0, log_every: 1, ..Default::default() };
    let weighted = SourceRows::from_scores(&pm.src, &table, 0.0).unwrap();
    let all_one = matches!(&weighted, SourceRows::Weighted { omega, .. } if omega.iter().all(|&w| w == 1.0));
    let (a, la) = train(&pm.tar, weighted, None, &cfg, STEPS, 7, None).unwrap();
    let (b, lb) = train(&pm.tar, SourceRows::Pooled(&pm.src), None, &cfg, STEPS, 7, None).unwrap();
    let same_losses = la.iter().zip(&lb).all(|(x, y)| {
        x.loss_v.to_bits() == y.loss_v.to_bits() && x.loss_q.to_bits() == y.loss_q.to_bits() && x.loss_pi.to_bits() == y.loss_pi.to_bits()
    });
    let same = params_equal(&a, &b);
    outcome(
        all_one && same && same_losses,
        format!("ω ≡ 1 (all ones: {all_one}), ξ = 0, λ = 0 vs pooled over {STEPS} steps: parameters bit-identical {same}, per-step losses bit-identical {same_losses}"),
    )
}

/// Copy of `ds` with every row where `mask` holds replaced by garbage.
fn scrambled(ds: &TransitionDataset, mask: &[bool]) -> TransitionDataset {
    let mut out = TransitionDataset::with_capacity(ds.state_dim(), ds.action_dim(), ds.len());
    for (i, &m) in mask.iter().enumerate() {
        let t = ds.get(i);
        if m {
            let junk = |v: &[f32]| v.iter().map(|x| -7.0 * x + 3.0).collect::<Vec<f32>>();
            out.push(&junk(t.state), &junk(t.action), 100.0, &junk(t.next_state), !t.terminal, ds.origin(i)).unwrap();
        } else {
            out.push(t.state, t.action, t.reward, t.next_state, t.terminal, ds.origin(i)).unwrap();
        }
    }
    out
}

fn gating() -> Outcome {
    const XI: f64 = 50.0;
    const STEPS: usize = 300;
    let pm = point_mass(&EnvSpec::point_mass(), 10_000, 2000, 8);
    let n = pm.src.len();
    let table = score_source(&pm.src, &pm.tar, 5).unwrap();
    let rows = SourceRows::from_scores(&pm.src, &table, XI).unwrap();
    let omega = match &rows {
        SourceRows::Weighted { omega, .. } => omega.clone(),
        _ => unreachable!(),
    };
    let kept = omega.iter().filter(|&&w| w > 0.0).count() as f64 / n as f64;
    let frac_ok = (kept - 0.5).abs() <= 1.0 / n as f64;

    let (cvae, _) = train_cvae(&pm.tar, &CvaeConfig { hidden: vec![32, 32], train_steps: 200, ..Default::default() }, 8).unwrap();
    let cfg = IqlConfig { hidden: vec![64, 64], xi: XI, lambda: 0.1, log_every: STEPS, ..Default::default() };
    let run = |src: &TransitionDataset, cvae: &CvaeModel| {
        let mut t = Trainer::new(&pm.tar, SourceRows::Weighted { data: src, omega: omega.clone() }, Some(cvae), &cfg, 8).unwrap();
        for _ in 0..STEPS {
            t.step().unwrap();
        }
        t.into_bundle()
    };
    let base = run(&pm.src, &cvae);
    let gated: Vec<bool> = omega.iter().map(|&w| w == 0.0).collect();
    let kept_mask: Vec<bool> = gated.iter().map(|g| !g).collect();
    let gated_inert = params_equal(&base, &run(&scrambled(&pm.src, &gated), &cvae));
    let kept_matter = !params_equal(&base, &run(&scrambled(&pm.src, &kept_mask), &cvae));
    outcome(
        frac_ok && gated_inert && kept_matter,
        format!(
            "ξ = {XI}: kept fraction {kept:.4} (0.5 ± {:.4}); rewriting every gated row leaves all networks bit-identical after {STEPS} steps: {gated_inert}; rewriting kept rows changes them: {kept_matter}",
            1.0 / n as f64
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. DmC vs pooled on the shifted point mass

/// Desk-scale settings for one run on a single core.
struct Scale {
    base_gravity: f64,
    n_src: usize,
    n_tar: usize,
    generated: usize,
    diffusion_hidden: usize,
    diffusion_steps: usize,
    rl_hidden: usize,
    rl_steps: usize,
    cvae_hidden: usize,
    cvae_steps: usize,
    eval_episodes: usize,
}

const SCALE: Scale = Scale {
    base_gravity: 2.0,
    n_src: 10_000,
    n_tar: 5000,
    generated: 10_000,
    diffusion_hidden: 128,
    diffusion_steps: 6000,
    rl_hidden: 128,
    rl_steps: 20_000,
    cvae_hidden: 64,
    cvae_steps: 3000,
    eval_episodes: 100,
};

fn dmc_vs_pooled() -> Outcome {
    const SEEDS: u64 = 5;
    const MIN_WINS: usize = 4;
    const MAX_RUN_SECS: f64 = 20.0 * 60.0;
    let s = &SCALE;
    let spec = EnvSpec { gravity: s.base_gravity, ..EnvSpec::point_mass() };
    let (mut wins, mut slowest) = (0, 0.0f64);
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let t = Instant::now();
        let pm = point_mass(&spec, s.n_src, s.n_tar, 900 + seed);
        let setup = secs(t.elapsed());
        let ns = |b: &PolicyBundle| {
            env::evaluate(&pm.tar_spec, &MeanActionPolicy::new(b).unwrap(), &pm.r_tar, s.eval_episodes, 9000 + seed)
                .unwrap()
                .normalized_score
        };
        let iql = IqlConfig { hidden: vec![s.rl_hidden; 2], log_every: s.rl_steps, ..Default::default() };

        let t = Instant::now();
        let table = score_source(&pm.src, &pm.tar, 5).unwrap();
        let dcfg = DiffusionConfig { hidden: vec![s.diffusion_hidden; 2], train_steps: s.diffusion_steps, lr: 1e-3, ..Default::default() };
        let (model, _) = train_denoiser(&pm.src, &table, &dcfg, seed).unwrap();
        let aug =
            augment_source(&pm.src, &pm.tar, &table, &model, &GuidanceConfig { count: s.generated, ..Default::default() }, seed).unwrap();
        let ccfg = CvaeConfig { hidden: vec![s.cvae_hidden; 2], train_steps: s.cvae_steps, lr: 1e-3, ..Default::default() };
        let (cvae, _) = train_cvae(&pm.tar, &ccfg, seed).unwrap();
        let rows = SourceRows::from_scores(&aug.dataset, &aug.scores, iql.xi).unwrap();
        let (dmc_policy, _) = train(&pm.tar, rows, Some(&cvae), &iql, s.rl_steps, seed, None).unwrap();
        let dmc_ns = ns(&dmc_policy);
        let dmc_secs = setup + secs(t.elapsed());

        let t = Instant::now();
        let pooled_cfg = IqlConfig { lambda: 0.0, ..iql.clone() };
        let (pooled_policy, _) = train(&pm.tar, SourceRows::Pooled(&pm.src), None, &pooled_cfg, s.rl_steps, seed, None).unwrap();
        let pooled_ns = ns(&pooled_policy);
        let pooled_secs = setup + secs(t.elapsed());

        wins += usize::from(dmc_ns > pooled_ns);
        slowest = slowest.max(dmc_secs).max(pooled_secs);
        lines.push(format!("{dmc_ns:.1} vs {pooled_ns:.1}"));
        eprintln!("  criterion 9 seed {seed}: DmC NS {dmc_ns:.1} ({dmc_secs:.0}s), pooled NS {pooled_ns:.1} ({pooled_secs:.0}s)");
    }
    outcome(
        wins >= MIN_WINS && slowest <= MAX_RUN_SECS,
        format!(
            "DmC vs pooled NS per seed [{}]: DmC ahead in {wins}/{SEEDS} (need {MIN_WINS}); slowest run {slowest:.0}s (≤ {MAX_RUN_SECS}s)",
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Behavior model

fn gaussian_behavior(n: usize, mean: f64, sd: f64, rng: &mut Rng) -> TransitionDataset {
    let mut ds = TransitionDataset::new(1, 1);
    for _ in 0..n {
        let s: f32 = rng.random_range(-1.0..1.0);
        let a = (mean + sd * normal_f64(rng)) as f32;
        ds.push(&[s], &[a], 0.0, &[s], false, Origin::Target).unwrap();
    }
    ds
}

fn behavior_model() -> Outcome {
    const ROWS: usize = 200;
    const TRIALS: u64 = 100;
    let mut rng = rng_from_seed(10);
    let train_set = gaussian_behavior(4000, 0.5, 0.1, &mut rng);
    let cfg = CvaeConfig { hidden: vec![64, 64], train_steps: 3000, batch_size: 128, lr: 1e-3, ..Default::default() };
    let (model, _) = train_cvae(&train_set, &cfg, 10).unwrap();

    let held = gaussian_behavior(ROWS, 0.5, 0.1, &mut rng);
    let states: Vec<f32> = (0..ROWS).map(|i| held.get(i).state[0]).collect();
    let actions: Vec<f32> = (0..ROWS).map(|i| held.get(i).action[0]).collect();
    let elbo = model.elbo(&states, &actions, 64, 11).unwrap();
    let iw = model.iw_log_likelihood(&states, &actions, 1024, 12).unwrap();
    let gap: Vec<f64> = iw.iter().zip(&elbo).map(|(i, e)| i - e).collect();
    let (gap_mean, gap_se) = mean_and_se(&gap);
    let bound_ok = gap_mean >= -2.0 * gap_se;

    let mut ordered = 0;
    for trial in 0..TRIALS {
        let s = [rng.random_range(-1.0..1.0f32)];
        let on = model.log_prob(&s, &[0.5], 8, trial).unwrap()[0];
        let off = model.log_prob(&s, &[0.5 + 0.3 + rng.random_range(0.0..1.0f32)], 8, trial).unwrap()[0];
        ordered += usize::from(on > off);
    }
    outcome(
        bound_ok && ordered == TRIALS as usize,
        format!(
            "IW-1024 − ELBO = {gap_mean:.4} ± {gap_se:.4} (ELBO {:.3}, IW {:.3}; need ≥ −2 SE); on-support log-prob above off-support in {ordered}/{TRIALS} trials",
            mean(&elbo),
            mean(&iw)
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Formats and reruns

const TINY: &str = "\
collect.src_rows = 2000
collect.tar_rows = 500
collect.cem_iterations = 5
diffusion.hidden = 32,32
diffusion.steps = 300
diffusion.log_every = 100
count = 500
rl.hidden = 32,32
rl.steps = 300
rl.log_every = 100
rl.eval_episodes = 5
cvae.hidden = 32,32
cvae.steps = 200
diagnose.classifier_hidden = 16
";

fn random_dataset(rng: &mut Rng) -> TransitionDataset {
    let (s, a) = (rng.random_range(1..6usize), rng.random_range(0..4usize));
    let n = rng.random_range(1..300usize);
    let mut ds = TransitionDataset::new(s, a);
    let v = |rng: &mut Rng, k: usize| -> Vec<f32> { (0..k).map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)).collect() };
    for _ in 0..n {
        let (st, ac, r, ns) = (v(rng, s), v(rng, a), v(rng, 1)[0], v(rng, s));
        ds.push(&st, &ac, r, &ns, rng.random(), Origin::SourceReal).unwrap();
    }
    ds
}

fn formats_and_reruns() -> Outcome {
    const CASES: usize = 200;
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(11);
    let mut bad = 0usize;
    for case in 0..CASES {
        let ds = random_dataset(&mut rng);
        let path = dir.path().join("rt.dmcd");
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&path, &bytes, Origin::SourceReal).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path, Origin::SourceReal).unwrap();
        let same = |x: &TransitionDataset| {
            x.state_dim() == ds.state_dim()
                && x.action_dim() == ds.action_dim()
                && x.records().iter().map(|v| v.to_bits()).eq(ds.records().iter().map(|v| v.to_bits()))
        };
        bad += usize::from(!same(&back) || !same(&loaded) || encode_dataset(&loaded).unwrap() != bytes);

        let depth = rng.random_range(2..5usize);
        let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..20usize)).collect();
        let nets: Vec<Mlp> = (0..rng.random_range(1..4)).map(|_| Mlp::new(&sizes, Activation::Relu, &mut rng).unwrap()).collect();
        let refs: Vec<&Mlp> = nets.iter().collect();
        let wpath = dir.path().join(format!("rt{}.dmcw", case % 2));
        let wbytes = encode_networks(&refs);
        save_networks(&refs, &wpath).unwrap();
        let a = decode_networks(&wpath, &wbytes, Activation::Relu).unwrap();
        let b = load_networks(&wpath, Activation::Relu).unwrap();
        let same_nets = |x: &[Mlp]| {
            x.len() == nets.len()
                && x.iter().zip(&nets).all(|(p, q)| {
                    p.sizes() == q.sizes() && p.params().iter().map(|v| v.to_bits()).eq(q.params().iter().map(|v| v.to_bits()))
                })
        };
        bad += usize::from(!same_nets(&a) || !same_nets(&b));
    }

    let out = dir.path().join("run");
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    let p = |path: &Path| path.to_str().unwrap().to_string();
    cfg.set("out", &p(&out)).unwrap();
    cfg.set("src", &p(&out.join(pipeline::SOURCE_FILE))).unwrap();
    cfg.set("tar", &p(&out.join(pipeline::TARGET_FILE))).unwrap();
    cfg.validate().unwrap();
    for command in pipeline::COMMANDS {
        pipeline::run_command(command, &cfg).unwrap();
    }
    let report = pipeline::rerun(&out.join("manifest.json"), &dir.path().join("again")).unwrap();
    let differing = report.outputs.iter().filter(|(_, _, ok)| !ok).count();
    outcome(
        bad == 0 && report.all_match() && !report.outputs.is_empty(),
        format!(
            "{CASES} random DMCD and DMCW round trips: {bad} not bit-exact (need 0); manifest rerun of {} stages: {}/{} artifacts bit-identical",
            pipeline::COMMANDS.len(),
            report.outputs.len() - differing,
            report.outputs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 12. Imbalance

fn imbalance() -> Outcome {
    const N_SRC: usize = 20_000;
    const N_TAR: usize = 100;
    const BAND_WIDTH: f64 = 0.1;
    const MIN_BAND: f64 = 0.8;
    const MIN_DECILES: usize = 5;
    const DECILE_MIN_FRAC: f64 = 0.01;
    let pm = point_mass(&EnvSpec::point_mass(), N_SRC, N_TAR, 12);
    let probs = classifier_score(&pm.src, &pm.tar, &ClassifierConfig::default(), 12).unwrap();
    let (band_sa, band_sas) = (densest_band(&probs.p_sa, BAND_WIDTH), densest_band(&probs.p_sas, BAND_WIDTH));
    let table = score_source(&pm.src, &pm.tar, 5).unwrap();
    let deciles = occupied_deciles(&table.weight, DECILE_MIN_FRAC);
    let any_row = occupied_deciles(&table.weight, f64::MIN_POSITIVE);
    outcome(
        band_sa.min(band_sas) >= MIN_BAND && deciles >= MIN_DECILES,
        format!(
            "{N_SRC}:{N_TAR} rows: classifier mass in densest {BAND_WIDTH}-band p(sa) {band_sa:.3}, p(sas) {band_sas:.3} (≥ {MIN_BAND}); k-NN weights occupy {deciles} deciles with ≥ {DECILE_MIN_FRAC} of rows (≥ {MIN_DECILES}), {any_row} with any row"
        ),
    )
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "k-NN KL oracle", kl_oracle),
        (2, "scoring throughput", throughput),
        (3, "k-NN exactness", exactness),
        (4, "gradient checks", gradients),
        (5, "guidance algebra", guidance_algebra),
        (6, "guidance effectiveness", guidance_effect),
        (7, "unit weights reproduce pooled IQL", unit_weights_match_pooled),
        (8, "selection gating", gating),
        (9, "DmC vs pooled", dmc_vs_pooled),
        (10, "behavior model", behavior_model),
        (11, "format round trips and reruns", formats_and_reruns),
        (12, "imbalance diagnostics", imbalance),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let prev_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let (mut passed, mut failed) = (0, 0);
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        if result.pass {
            passed += 1;
        } else {
            failed += 1;
        }
        println!("criterion {id:>2} {verdict} {name}: {} [{:.1}s]", result.detail, secs(t.elapsed()));
    }
    std::panic::set_hook(prev_hook);
    println!("acceptance: {passed} passed, {failed} failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
