//! Times gap scoring of synthetic transition-like data.
//!
//! `cargo run --release -p dmc-core --example score_throughput -- [n_src] [n_tar]`

use std::time::Instant;

use dmc_core::dataset::{Origin, TransitionDataset};
use dmc_core::knn::score_source;
use dmc_core::rng::{normal_f32, rng_from_seed};
use rand::Rng;

/// Linear-Gaussian dynamics: 8-D state, 4-D action, gap features of width 20.
fn transitions(n: usize, drift: f32, seed: u64) -> TransitionDataset {
    let mut rng = rng_from_seed(seed);
    let mut ds = TransitionDataset::with_capacity(8, 4, n);
    let mut s = [0.0f32; 8];
    let mut a = [0.0f32; 4];
    let mut ns = [0.0f32; 8];
    for _ in 0..n {
        s.iter_mut().for_each(|v| *v = normal_f32(&mut rng));
        a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        for j in 0..8 {
            let push = a[j % 4] * 0.3 + s[(j + 1) % 8] * 0.1 - drift * (j % 2) as f32;
            ns[j] = s[j] + push + 0.05 * normal_f32(&mut rng);
        }
        ds.push(&s, &a, 0.0, &ns, false, Origin::SourceReal).unwrap();
    }
    ds
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let n_src = args.first().copied().unwrap_or(1_000_000);
    let n_tar = args.get(1).copied().unwrap_or(5_000);
    let src = transitions(n_src, 0.0, 1);
    let tar = transitions(n_tar, 0.2, 2);
    let t = Instant::now();
    let table = score_source(&src, &tar, 5).unwrap();
    println!("scored {n_src} x {n_tar} in {:.2?} (mean w {:.3})", t.elapsed(), table.weight.iter().sum::<f64>() / table.len() as f64);
}
