//! Distribution metrics over a pluggable image embedding.

use candle_core::{DType, Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{leaky_relu, Conv2d, ParamStore};

/// Maps `(N, C, H, W)` images to `N` feature vectors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;
}

/// Fixed, seeded, randomly initialised conv stack. The feature is the
/// concatenated spatial mean of every stage.
pub struct RandomConvEmbedder {
    convs: Vec<Conv2d>,
    batch: usize,
}

impl RandomConvEmbedder {
    pub const WIDTHS: [usize; 3] = [8, 16, 24];

    pub fn new(image_channels: usize, seed: u64) -> Result<Self> {
        let store = ParamStore::new(DType::F32, seed);
        let mut convs = Vec::new();
        let mut in_c = image_channels;
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(&store.pp(&format!("conv{i}")), in_c, w, 3, 2)?);
            in_c = w;
        }
        Ok(Self { convs, batch: 64 })
    }

    pub fn dim(&self) -> usize {
        Self::WIDTHS.iter().sum()
    }
}

impl FeatureExtractor for RandomConvEmbedder {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.dims4().map_err(|_| shape_err!("embedder expects (N, C, H, W), got {:?}", images.dims()))?.0;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = self.batch.min(n - start);
            let mut x = images.narrow(0, start, len)?.to_dtype(DType::F32)?.detach();
            let mut stages = Vec::new();
            for conv in &self.convs {
                x = leaky_relu(&conv.forward(&x)?, 0.2)?;
                stages.push(x.mean(D::Minus1)?.mean(D::Minus1)?);
            }
            let feats = Tensor::cat(&stages, 1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(feats);
            start += len;
        }
        Ok(out)
    }
}

/// Mean and unbiased covariance of row samples.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Metric("cannot fit a Gaussian to an empty set".into()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Metric("embeddings differ in dimension".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = (centered.transpose() * &centered) / denom;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    /// True when `eps` was added to both covariance diagonals.
    pub regularized: bool,
    pub eps: f64,
}

/// Fréchet distance `|m1-m2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
/// Either covariance having an eigenvalue below `eps` adds `eps I` to both.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>, eps: f64) -> Result<FidReport> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Metric("Gaussian parameters differ in dimension".into()));
    }
    let regularized = min_eigenvalue(s1) < eps || min_eigenvalue(s2) < eps;
    let (s1, s2) = if regularized {
        let id = DMatrix::<f64>::identity(d, d) * eps;
        (s1 + &id, s2 + &id)
    } else {
        (s1.clone(), s2.clone())
    };
    // (S1 S2)^(1/2) has the eigenvalues of the symmetric S1^(1/2) S2 S1^(1/2).
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let fid = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_cross;
    if !fid.is_finite() {
        return Err(Error::Metric(format!("Fréchet distance is not finite ({fid})")));
    }
    Ok(FidReport {
        fid: fid.max(0.0),
        regularized,
        eps,
    })
}

pub fn fid_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>], eps: f64) -> Result<FidReport> {
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    let report = frechet_distance(&m1, &s1, &m2, &s2, eps)?;
    if report.regularized {
        log::warn!("singular covariance; added {eps:e} to the diagonal");
    }
    Ok(report)
}

pub fn compute_fid(a: &Tensor, b: &Tensor, extractor: &dyn FeatureExtractor, eps: f64) -> Result<FidReport> {
    fid_from_embeddings(&extractor.embed(a)?, &extractor.embed(b)?, eps)
}

/// Mean pairwise Euclidean distance between embeddings ("perceptual-proxy").
pub fn lpips_proxy_from_embeddings(e: &[Vec<f64>]) -> Result<f64> {
    if e.len() < 2 {
        return Err(Error::Metric(format!("perceptual-proxy needs at least 2 images, got {}", e.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            total += e[i].iter().zip(&e[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn lpips_proxy(set: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    lpips_proxy_from_embeddings(&extractor.embed(set)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_samples(n: usize, mean: &[f64], scale: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                mean.iter()
                    .zip(scale)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_sets() {
        let a = gaussian_samples(200, &[0.0, 1.0, 2.0], &[1.0, 0.5, 2.0], 1);
        let r = fid_from_embeddings(&a, &a, 1e-9).unwrap();
        assert!(r.fid < 1e-6, "{}", r.fid);
        assert!(!r.regularized);
    }

    #[test]
    fn closed_form_diagonal() {
        // Diagonal covariances: sum (m1-m2)^2 + (s1 - s2)^2 over dimensions.
        let m1 = DVector::from_vec(vec![0.0, 1.0]);
        let m2 = DVector::from_vec(vec![1.0, -1.0]);
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let s2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]));
        let r = frechet_distance(&m1, &s1, &m2, &s2, 1e-12).unwrap();
        let expected = 1.0 + 4.0 + (2.0f64 - 1.0).powi(2) + (1.0f64 - 3.0).powi(2);
        assert!((r.fid - expected).abs() < 1e-9);
    }

    #[test]
    fn symmetric() {
        let a = gaussian_samples(150, &[0.0, 0.0, 0.0, 0.0], &[1.0, 2.0, 0.3, 1.0], 2);
        let b = gaussian_samples(120, &[0.5, 0.0, -1.0, 0.0], &[0.5, 1.0, 1.0, 3.0], 3);
        let ab = fid_from_embeddings(&a, &b, 1e-9).unwrap().fid;
        let ba = fid_from_embeddings(&b, &a, 1e-9).unwrap().fid;
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn singular_is_regularized() {
        let a = vec![vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]];
        let r = fid_from_embeddings(&a, &a, 1e-6).unwrap();
        assert!(r.regularized);
        assert!(r.fid < 1e-6);
    }

    #[test]
    fn lpips_needs_pairs() {
        assert!(matches!(lpips_proxy_from_embeddings(&[vec![1.0]]), Err(Error::Metric(_))));
        let d = lpips_proxy_from_embeddings(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert!((d - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn embedder_is_seeded() {
        let x = Tensor::randn(0f32, 1.0, (5, 3, 16, 16), &Device::Cpu).unwrap();
        let a = RandomConvEmbedder::new(3, 4).unwrap();
        let b = RandomConvEmbedder::new(3, 4).unwrap();
        let ea = a.embed(&x).unwrap();
        assert_eq!(ea, b.embed(&x).unwrap());
        assert_eq!(ea.len(), 5);
        assert_eq!(ea[0].len(), a.dim());
    }
}
