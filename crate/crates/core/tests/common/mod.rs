#![allow(dead_code)]

pub mod oracle;

use fscl_core::{normalize_embeddings, RngSeed, ViewBatch};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Random unit embeddings. With `paired`, views come in sibling pairs sharing labels.
pub fn random_batch(
    seed: u64,
    views: usize,
    dim: usize,
    n_y: usize,
    n_s: usize,
    paired: bool,
) -> ViewBatch {
    let mut rng = RngSeed(seed).stream(0);
    let samples = if paired { views / 2 } else { views };
    let ys: Vec<usize> = (0..samples).map(|_| rng.random_range(0..n_y)).collect();
    let ss: Vec<usize> = (0..samples).map(|_| rng.random_range(0..n_s)).collect();
    let per = if paired { 2 } else { 1 };
    let n = samples * per;
    let emb: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let b = ViewBatch::new(
        emb,
        (0..n).map(|l| ys[l / per]).collect(),
        (0..n).map(|l| Some(ss[l / per])).collect(),
        (0..n).map(|l| l / per).collect(),
    )
    .unwrap();
    normalize_embeddings(&b).unwrap()
}

/// The six-view batch used across the loss tests: three samples, two views each.
pub fn six_view_batch() -> ViewBatch {
    let raw = vec![
        vec![0.9, 0.1, 0.2],
        vec![0.8, 0.3, 0.1],
        vec![0.1, 0.9, 0.3],
        vec![0.2, 0.7, -0.4],
        vec![0.5, 0.5, 0.6],
        vec![-0.3, 0.6, 0.7],
    ];
    let b = ViewBatch::new(
        raw,
        vec![0, 0, 0, 0, 1, 1],
        vec![Some(0), Some(0), Some(1), Some(1), Some(0), Some(0)],
        vec![0, 0, 1, 1, 2, 2],
    )
    .unwrap();
    normalize_embeddings(&b).unwrap()
}
