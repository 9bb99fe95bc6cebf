//! Training objectives. Every reduction is a mean over batch and elements;
//! the frequency loss sums the four per-band means.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::log_softmax;
use crate::wavelet::{haar_decompose, Band};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls_g: f64,
    pub lambda_cls_d: f64,
    pub lambda_fre: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls_g: 1.0,
            lambda_cls_d: 1.0,
            lambda_fre: 1.0,
            lambda_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls_g, self.lambda_cls_d, self.lambda_fre, self.lambda_rec];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("loss inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Sum over {LL, LH, HL, HH} of the mean absolute band difference.
pub fn frequency_l1(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    same_shape(x, x_hat)?;
    let real = haar_decompose(x)?;
    let fake = haar_decompose(x_hat)?;
    let mut total: Option<Tensor> = None;
    for band in Band::ALL {
        let l = (real.get(band) - fake.get(band))?.abs()?.mean_all()?;
        total = Some(match total {
            None => l,
            Some(t) => (t + l)?,
        });
    }
    Ok(total.expect("four bands"))
}

pub fn local_reconstruction(x_hat: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(x_hat, target)?;
    Ok((x_hat - target)?.abs()?.mean_all()?)
}

pub fn hinge_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = (1.0 - real_scores)?.relu()?.mean_all()?;
    let fake = (fake_scores + 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

pub fn hinge_g(fake_scores: &Tensor) -> Result<Tensor> {
    Ok(fake_scores.mean_all()?.neg()?)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape_err!("{} labels for {b} rows of logits", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= n) {
        return Err(Error::Contract(format!("label {bad} out of range for {n} classes")));
    }
    let ids: Vec<u32> = labels.iter().map(|l| *l as u32).collect();
    let ids = Tensor::from_vec(ids, (b, 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&ids, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Scalar loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cls_g: f64,
    pub cls_d: f64,
    pub fre: f64,
    pub rec: f64,
}

impl LossParts {
    pub fn total_g(&self, w: &LossWeights) -> f64 {
        self.adv_g + w.lambda_cls_g * self.cls_g + w.lambda_fre * self.fre + w.lambda_rec * self.rec
    }

    pub fn total_d(&self, w: &LossWeights) -> f64 {
        self.adv_d + w.lambda_cls_d * self.cls_d
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("l_adv_g", self.adv_g),
            ("l_adv_d", self.adv_d),
            ("l_cls_g", self.cls_g),
            ("l_cls_d", self.cls_d),
            ("l_fre", self.fre),
            ("l_rec", self.rec),
        ]
    }
}

/// Differentiable generator objective from tensor-valued parts.
pub fn total_g(adv: &Tensor, cls: &Tensor, fre: &Tensor, rec: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let mut total = adv.clone();
    for (part, weight) in [(cls, w.lambda_cls_g), (fre, w.lambda_fre), (rec, w.lambda_rec)] {
        if weight != 0.0 {
            total = (total + (part * weight)?)?;
        }
    }
    Ok(total)
}

pub fn total_d(adv: &Tensor, cls: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if w.lambda_cls_d == 0.0 {
        return Ok(adv.clone());
    }
    Ok((adv + (cls * w.lambda_cls_d)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
