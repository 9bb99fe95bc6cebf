//! Residual critic with an adversarial head and an auxiliary class head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{avg_pool2, leaky_relu, Conv2d, Linear, ParamStore};

pub const RESIDUAL_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Width of the stem convolution.
    pub stem_channels: usize,
    /// Output widths of the four residual blocks.
    pub block_channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            block_channels: vec![32, 64, 128, 128],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// `(B,)` unbounded scores.
    pub adv_score: Tensor,
    /// `(B, num_classes)`.
    pub class_logits: Tensor,
}

/// Pre-activation residual block with average-pool downsampling.
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    slope: f64,
}

impl ResBlock {
    fn new(store: &ParamStore, in_c: usize, out_c: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&store.pp("conv1"), in_c, out_c, 3, 1)?,
            conv2: Conv2d::new(&store.pp("conv2"), out_c, out_c, 3, 1)?,
            shortcut: if in_c != out_c {
                Some(Conv2d::new(&store.pp("shortcut"), in_c, out_c, 1, 1)?)
            } else {
                None
            },
            slope,
        })
    }

    pub fn conv1(&self) -> &Conv2d {
        &self.conv1
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&leaky_relu(x, self.slope)?)?;
        let h = self.conv2.forward(&leaky_relu(&h, self.slope)?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((avg_pool2(&h)? + avg_pool2(&skip)?)?)
    }
}

pub struct Discriminator {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    adv_head: Linear,
    cls_head: Linear,
    num_classes: usize,
    image_size: usize,
    slope: f64,
}

impl Discriminator {
    pub fn new(store: &ParamStore, cfg: &DiscriminatorConfig, image_channels: usize, image_size: usize, num_classes: usize) -> Result<Self> {
        if cfg.block_channels.len() != RESIDUAL_BLOCKS || cfg.block_channels.contains(&0) || cfg.stem_channels == 0 {
            return Err(Error::Config(format!(
                "discriminator needs a positive stem width and {RESIDUAL_BLOCKS} block widths, got {:?}",
                cfg.block_channels
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("discriminator needs at least one class".into()));
        }
        if image_size < 1 << RESIDUAL_BLOCKS {
            return Err(Error::Config(format!("image_size {image_size} too small for {RESIDUAL_BLOCKS} downsamplings")));
        }
        let stem = Conv2d::new(&store.pp("stem"), image_channels, cfg.stem_channels, 3, 1)?;
        let mut blocks = Vec::with_capacity(RESIDUAL_BLOCKS);
        let mut in_c = cfg.stem_channels;
        for (i, &out_c) in cfg.block_channels.iter().enumerate() {
            blocks.push(ResBlock::new(&store.pp(&format!("block{i}")), in_c, out_c, cfg.leaky_slope)?);
            in_c = out_c;
        }
        Ok(Self {
            stem,
            blocks,
            adv_head: Linear::new(&store.pp("adv"), in_c, 1)?,
            cls_head: Linear::new(&store.pp("cls"), in_c, num_classes)?,
            num_classes,
            image_size,
            slope: cfg.leaky_slope,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn stem(&self) -> &Conv2d {
        &self.stem
    }

    pub fn blocks(&self) -> &[ResBlock] {
        &self.blocks
    }

    pub fn adv_head(&self) -> &Linear {
        &self.adv_head
    }

    pub fn cls_head(&self) -> &Linear {
        &self.cls_head
    }

    /// `x` is `(B, C, S, S)` in `[-1, 1]`.
    pub fn discriminate(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.image_size || w != self.image_size {
            return Err(shape_err!("discriminator built for {0}x{0}, got {h}x{w}", self.image_size));
        }
        let mut h = self.stem.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let pooled = leaky_relu(&h, self.slope)?.mean(3)?.mean(2)?;
        Ok(DiscriminatorOutput {
            adv_score: self.adv_head.forward(&pooled)?.squeeze(1)?,
            class_logits: self.cls_head.forward(&pooled)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn small() -> (ParamStore, Discriminator) {
        let store = ParamStore::new(DType::F32, 3);
        let cfg = DiscriminatorConfig {
            stem_channels: 4,
            block_channels: vec![4, 8, 8, 8],
            leaky_slope: 0.2,
        };
        let d = Discriminator::new(&store, &cfg, 3, 16, 5).unwrap();
        (store, d)
    }

    #[test]
    fn output_shapes() {
        let (_, d) = small();
        let x = Tensor::randn(0f32, 0.5, (6, 3, 16, 16), &Device::Cpu).unwrap();
        let out = d.discriminate(&x).unwrap();
        assert_eq!(out.adv_score.dims(), &[6]);
        assert_eq!(out.class_logits.dims(), &[6, 5]);
    }

    #[test]
    fn duplicated_rows_match() {
        let (_, d) = small();
        let one = Tensor::randn(0f32, 0.5, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let other = Tensor::randn(0f32, 0.5, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&one, &other, &one], 0).unwrap();
        let out = d.discriminate(&x).unwrap();
        let s = out.adv_score.to_vec1::<f32>().unwrap();
        assert_eq!(s[0], s[2]);
        let l = out.class_logits.to_vec2::<f32>().unwrap();
        assert_eq!(l[0], l[2]);
    }

    #[test]
    fn zero_heads() {
        let (store, d) = small();
        for (name, var) in store.trainable() {
            if name.starts_with("adv.") || name.starts_with("cls.") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::randn(0f32, 0.5, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let out = d.discriminate(&x).unwrap();
        assert!(out.adv_score.to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        let probs = crate::nn::log_softmax(&out.class_logits).unwrap().exp().unwrap();
        for row in probs.to_vec2::<f32>().unwrap() {
            assert!(row.iter().all(|p| (*p - 0.2).abs() < 1e-6));
        }
    }

    #[test]
    fn wrong_size_rejected() {
        let (_, d) = small();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.discriminate(&x), Err(Error::Shape(_))));
    }
}
