//! Independent reference implementations and small fixtures shared by the
//! integration tests. Nothing here calls into the library's math.

#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use wavegan::data::{build_manifest, write_synthetic_dataset, SplitManifest};
use wavegan::discriminator::DiscriminatorConfig;
use wavegan::generator::GeneratorConfig;
use wavegan::RunConfig;

pub fn tensor(values: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(values, dims, &Device::Cpu).unwrap()
}

pub fn random_values(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Per-block Haar bands of an `(n, c, h, w)` array: `[LL, LH, HL, HH]`,
/// LH high-pass along height.
pub fn haar_oracle(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> [Vec<f64>; 4] {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = [vec![0.0; n * c * h2 * w2], vec![0.0; n * c * h2 * w2], vec![0.0; n * c * h2 * w2], vec![0.0; n * c * h2 * w2]];
    for p in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                let at = |di: usize, dj: usize| x[(p * h + 2 * i + di) * w + 2 * j + dj];
                let (a, b, cc, d) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                let k = (p * h2 + i) * w2 + j;
                out[0][k] = (a + b + cc + d) / 2.0;
                out[1][k] = (cc + d - a - b) / 2.0;
                out[2][k] = (b + d - a - cc) / 2.0;
                out[3][k] = (a - b - cc + d) / 2.0;
            }
        }
    }
    out
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn frequency_l1_oracle(x: &[f64], y: &[f64], dims: [usize; 4]) -> f64 {
    let [n, c, h, w] = dims;
    let bx = haar_oracle(x, n, c, h, w);
    let by = haar_oracle(y, n, c, h, w);
    (0..4).map(|k| mean_abs_diff(&bx[k], &by[k])).sum()
}

pub fn hinge_d_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let r: f64 = real.iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|v| (1.0 + v).max(0.0)).sum::<f64>() / fake.len() as f64;
    r + f
}

pub fn hinge_g_oracle(fake: &[f64]) -> f64 {
    -fake.iter().sum::<f64>() / fake.len() as f64
}

pub fn cross_entropy_oracle(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in labels.iter().enumerate() {
        let l = &logits[row * classes..(row + 1) * classes];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - l[y];
    }
    total / labels.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Minimal 16x16 model widths for gradient and determinism checks.
pub fn tiny_config(image_size: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.generator = GeneratorConfig {
        image_size,
        encoder_channels: vec![4, 6, 8, 8, 8],
        ..Default::default()
    };
    cfg.discriminator = DiscriminatorConfig {
        stem_channels: 4,
        block_channels: vec![4, 6, 8, 8],
        ..Default::default()
    };
    cfg.train.batch_episodes = 2;
    cfg.train.iterations = 100;
    cfg.train.checkpoint_interval = 50;
    cfg.eval.n_per_class = 8;
    cfg.eval.generation_batch = 4;
    cfg
}

/// Synthetic class-folder dataset plus its split manifest.
pub fn synthetic(root: &Path, classes: usize, per_class: usize, size: usize, seen: usize, seed: u64) -> SplitManifest {
    write_synthetic_dataset(root, classes, per_class, size, seed).unwrap();
    build_manifest(root, seen, classes - seen, 0.25, seed).unwrap()
}
