//! Frequency-aware generator: a five-block encoder whose first four block
//! outputs are Haar-decomposed, with LL bands skipped forward inside the
//! encoder and the detail bands injected into the mirrored decoder levels.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fusion::{fuse_local, FusionPlan};
use crate::nn::{leaky_relu, upsample2, BatchNorm2d, Conv2d, Mode, ParamStore};
use crate::wavelet::{haar_decompose, haar_reconstruct, Band, BandMask, FrequencyBands};

pub const ENCODER_BLOCKS: usize = 5;
pub const WAVELET_LEVELS: usize = ENCODER_BLOCKS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Element-wise average of the K members' detail bands.
    Mean,
    /// Detail bands of the fusion base member only.
    BaseIndex,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Mean => "mean",
            Variant::BaseIndex => "base_index",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub shots: usize,
    /// Output channels of the five encoder blocks.
    pub encoder_channels: Vec<usize>,
    pub variant: Variant,
    pub use_ll_skip: bool,
    pub use_hf_skip: bool,
    pub hf_band_mask: BandMask,
    pub use_lof: bool,
    pub fusion_fraction: f64,
    pub fusion_top_n: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            shots: 3,
            encoder_channels: vec![32, 64, 128, 128, 128],
            variant: Variant::BaseIndex,
            use_ll_skip: true,
            use_hf_skip: true,
            hf_band_mask: BandMask::DETAIL,
            use_lof: true,
            fusion_fraction: 1.0,
            fusion_top_n: 1,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!("image_size must be a power of two >= 16, got {s}")));
        }
        if self.encoder_channels.len() != ENCODER_BLOCKS || self.encoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder_channels needs {ENCODER_BLOCKS} positive widths, got {:?}",
                self.encoder_channels
            )));
        }
        if self.shots < 2 {
            return Err(Error::Config(format!("shots must be >= 2, got {}", self.shots)));
        }
        if self.use_hf_skip && self.hf_band_mask.is_empty() {
            return Err(Error::Config("hf_band_mask is empty while use_hf_skip is on".into()));
        }
        if !(self.fusion_fraction > 0.0 && self.fusion_fraction <= 1.0) || self.fusion_top_n == 0 {
            return Err(Error::Config("fusion_fraction must be in (0, 1] and fusion_top_n >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size of encoder level `i` (0-based).
    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }
}

/// Everything the decoder needs from one encoder pass over `B` episodes of
/// `K` images each. Per-level tensors have a leading `B * K` axis, grouped
/// by episode.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub features: Vec<Tensor>,
    pub bands: Vec<FrequencyBands>,
    pub fused: Tensor,
    pub plans: Vec<FusionPlan>,
    pub episodes: usize,
    pub shots: usize,
}

/// Conv -> batch norm -> leaky ReLU.
pub struct ConvBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
    slope: f64,
}

impl ConvBlock {
    fn new(store: &ParamStore, in_c: usize, out_c: usize, stride: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&store.pp("conv"), in_c, out_c, 3, stride)?,
            norm: BatchNorm2d::new(&store.pp("bn"), out_c)?,
            slope,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn norm(&self) -> &BatchNorm2d {
        &self.norm
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        leaky_relu(&self.norm.forward(&self.conv.forward(x)?, mode)?, self.slope)
    }
}

pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<ConvBlock>,
    /// 1x1 channel adapters for the LL skips, `None` where widths already match.
    ll_proj: Vec<Option<Conv2d>>,
    decoder: Vec<ConvBlock>,
    output: Conv2d,
}

impl Generator {
    pub fn new(store: &ParamStore, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.encoder_channels;
        let slope = cfg.leaky_slope;
        let enc = store.pp("enc");
        let mut encoder = Vec::with_capacity(ENCODER_BLOCKS);
        for i in 0..ENCODER_BLOCKS {
            let in_c = if i == 0 { cfg.image_channels } else { ch[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            encoder.push(ConvBlock::new(&enc.pp(&format!("block{i}")), in_c, ch[i], stride, slope)?);
        }
        let mut ll_proj = Vec::with_capacity(WAVELET_LEVELS);
        for i in 0..WAVELET_LEVELS {
            ll_proj.push(if ch[i] != ch[i + 1] {
                Some(Conv2d::new(&enc.pp(&format!("ll_proj{i}")), ch[i], ch[i + 1], 1, 1)?)
            } else {
                None
            });
        }
        // decoder block j lands on encoder level WAVELET_LEVELS - 1 - j
        let dec = store.pp("dec");
        let mut decoder = Vec::with_capacity(WAVELET_LEVELS);
        for j in 0..WAVELET_LEVELS {
            let level = WAVELET_LEVELS - 1 - j;
            decoder.push(ConvBlock::new(&dec.pp(&format!("block{j}")), ch[level + 1], ch[level], 1, slope)?);
        }
        let output = Conv2d::new(&store.pp("out"), ch[0], cfg.image_channels, 3, 1)?;
        Ok(Self {
            cfg,
            encoder,
            ll_proj,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn encoder_blocks(&self) -> &[ConvBlock] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[ConvBlock] {
        &self.decoder
    }

    pub fn output_conv(&self) -> &Conv2d {
        &self.output
    }

    pub fn dtype(&self) -> candle_core::DType {
        self.output.weight().dtype()
    }

    /// `images` is `(B, K, C, S, S)`. Plans must hold one entry per episode;
    /// they are updated with the fused locations.
    pub fn encode(&self, images: &Tensor, plans: &[FusionPlan], mode: Mode) -> Result<EncoderTrace> {
        let (b, k, c, h, w) = images.dims5().map_err(|_| {
            shape_err!("generator input must be (B, K, C, H, W), got {:?}", images.dims())
        })?;
        let s = self.cfg.image_size;
        if c != self.cfg.image_channels || h != s || w != s {
            return Err(shape_err!("expected {}x{s}x{s} images, got {c}x{h}x{w}", self.cfg.image_channels));
        }
        if plans.len() != b {
            return Err(Error::Contract(format!("{} fusion plans for {b} episodes", plans.len())));
        }
        if plans.iter().any(|p| p.shots() != k) {
            return Err(Error::Contract(format!("fusion plans do not match K = {k}")));
        }

        let mut x = self.encoder[0].forward(&images.reshape((b * k, c, h, w))?, mode)?;
        let mut features = Vec::with_capacity(ENCODER_BLOCKS);
        let mut bands: Vec<FrequencyBands> = Vec::with_capacity(WAVELET_LEVELS);
        for i in 1..ENCODER_BLOCKS {
            let level_bands = haar_decompose(&x)?;
            let mut next = self.encoder[i].forward(&x, mode)?;
            if self.cfg.use_ll_skip {
                let ll = match &self.ll_proj[i - 1] {
                    Some(proj) => proj.forward(&level_bands.ll)?,
                    None => level_bands.ll.clone(),
                };
                next = (next + ll)?;
            }
            features.push(x);
            bands.push(level_bands);
            x = next;
        }
        features.push(x.clone());

        let (_, c5, fh, fw) = x.dims4()?;
        let grouped = x.reshape((b, k, c5, fh, fw))?;
        let mut plans = plans.to_vec();
        let mut fused = Vec::with_capacity(b);
        for (e, plan) in plans.iter_mut().enumerate() {
            let members = grouped.get(e)?;
            if !self.cfg.use_lof {
                *plan = plan.clone().global(fh, fw);
            }
            fused.push(fuse_local(&members, plan)?);
        }
        Ok(EncoderTrace {
            features,
            bands,
            fused: Tensor::stack(&fused, 0)?,
            plans,
            episodes: b,
            shots: k,
        })
    }

    fn aggregate(&self, bands: &FrequencyBands, trace: &EncoderTrace) -> Result<FrequencyBands> {
        match self.cfg.variant {
            Variant::Mean => aggregate_bands_mean(bands, trace.shots),
            Variant::BaseIndex => {
                let base: Vec<usize> = trace.plans.iter().map(|p| p.base_index).collect();
                aggregate_bands_base(bands, trace.shots, &base)
            }
        }
    }

    pub fn decode(&self, trace: &EncoderTrace, mode: Mode) -> Result<Tensor> {
        if self.cfg.variant == Variant::BaseIndex && trace.plans.len() != trace.episodes {
            return Err(Error::Config("base-index aggregation needs one fusion plan per episode".into()));
        }
        let mask = self.cfg.hf_band_mask.without(Band::LL);
        let mut x = trace.fused.clone();
        for (j, block) in self.decoder.iter().enumerate() {
            x = block.forward(&upsample2(&x)?, mode)?;
            if self.cfg.use_hf_skip && !mask.is_empty() {
                let level = WAVELET_LEVELS - 1 - j;
                let aggregated = self.aggregate(&trace.bands[level], trace)?;
                x = (x + haar_reconstruct(&aggregated.masked(mask)?)?)?;
            }
        }
        Ok(self.output.forward(&x)?.tanh()?)
    }

    /// Encode then decode; returns images `(B, C, S, S)` and the trace.
    pub fn forward(&self, images: &Tensor, plans: &[FusionPlan], mode: Mode) -> Result<(Tensor, EncoderTrace)> {
        let trace = self.encode(images, plans, mode)?;
        let out = self.decode(&trace, mode)?;
        Ok((out, trace))
    }
}

fn check_grouping(bands: &FrequencyBands, shots: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = bands.dims();
    if shots == 0 || n % shots != 0 {
        return Err(shape_err!("{n} band sets cannot be grouped by K = {shots}"));
    }
    Ok((n / shots, c, h, w))
}

/// Element-wise mean over the K members of each episode. Written as
/// `x_0 + sum_k (x_k - x_0) / K` so identical members return `x_0` exactly.
pub fn aggregate_bands_mean(bands: &FrequencyBands, shots: usize) -> Result<FrequencyBands> {
    let (b, c, h, w) = check_grouping(bands, shots)?;
    if shots == 1 {
        return Ok(bands.clone());
    }
    bands.map(|t| {
        let g = t.reshape((b, shots, c, h, w))?;
        let first = g.narrow(1, 0, 1)?;
        let offsets = g.broadcast_sub(&first)?.sum_keepdim(1)?;
        Ok((first + (offsets / shots as f64)?)?.squeeze(1)?)
    })
}

/// The band set of each episode's base member.
pub fn aggregate_bands_base(bands: &FrequencyBands, shots: usize, base_index: &[usize]) -> Result<FrequencyBands> {
    let (b, _, _, _) = check_grouping(bands, shots)?;
    if base_index.len() != b {
        return Err(Error::Contract(format!("{} base indices for {b} episodes", base_index.len())));
    }
    if let Some(bad) = base_index.iter().find(|i| **i >= shots) {
        return Err(Error::Contract(format!("base index {bad} out of range for K = {shots}")));
    }
    let rows: Vec<u32> = base_index
        .iter()
        .enumerate()
        .map(|(e, i)| (e * shots + i) as u32)
        .collect();
    let ids = Tensor::new(rows.as_slice(), bands.ll.device())?;
    bands.map(|t| Ok(t.index_select(&ids, 0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::make_fusion_plan;
    use candle_core::{DType, Device};

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 16,
            encoder_channels: vec![4, 8, 8, 8, 8],
            shots: 2,
            ..Default::default()
        }
    }

    fn bands_of(n: usize, value: impl Fn(usize) -> f32) -> FrequencyBands {
        let dev = Device::Cpu;
        let mut data = vec![];
        for i in 0..n {
            data.extend(std::iter::repeat(value(i)).take(2 * 3 * 3));
        }
        let t = Tensor::from_vec(data, (n, 2, 3, 3), &dev).unwrap();
        FrequencyBands::new(t.clone(), t.clone(), t.clone(), t).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(small_cfg().validate().is_ok());
        let bad = GeneratorConfig { image_size: 24, ..small_cfg() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = GeneratorConfig { image_size: 8, ..small_cfg() };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig { encoder_channels: vec![4, 4], ..small_cfg() };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig { hf_band_mask: BandMask::EMPTY, ..small_cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mean_of_constants() {
        let bands = bands_of(2, |i| if i == 0 { 1.0 } else { 3.0 });
        let m = aggregate_bands_mean(&bands, 2).unwrap();
        let v = m.hh.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x == 2.0));
        let same = aggregate_bands_mean(&bands, 1).unwrap();
        assert_eq!(same.ll.dims(), bands.ll.dims());
    }

    #[test]
    fn base_selection_and_errors() {
        let bands = bands_of(6, |i| i as f32);
        let sel = aggregate_bands_base(&bands, 3, &[2, 0]).unwrap();
        let v = sel.lh.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v[..18].iter().all(|x| *x == 2.0));
        assert!(v[18..].iter().all(|x| *x == 3.0));
        assert!(matches!(aggregate_bands_base(&bands, 3, &[3, 0]), Err(Error::Contract(_))));
        assert!(aggregate_bands_mean(&bands, 4).is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let store = ParamStore::new(DType::F32, 0);
        let g = Generator::new(&store, small_cfg()).unwrap();
        let x = Tensor::randn(0f32, 0.5, (3, 2, 3, 16, 16), &Device::Cpu).unwrap();
        let plans: Vec<_> = (0..3).map(|s| make_fusion_plan(2, s).unwrap()).collect();
        let (out, trace) = g.forward(&x, &plans, Mode::Train).unwrap();
        assert_eq!(out.dims(), &[3, 3, 16, 16]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| p.abs() <= 1.0));
        for (i, bands) in trace.bands.iter().enumerate() {
            let (_, _, fh, fw) = trace.features[i].dims4().unwrap();
            assert_eq!(bands.dims().2 * 2, fh);
            assert_eq!(bands.dims().3 * 2, fw);
        }
        assert_eq!(trace.features[4].dims4().unwrap().2, 1);
        assert!(trace.plans.iter().all(|p| p.replaced.is_some()));
    }

    #[test]
    fn wrong_plan_count_rejected() {
        let store = ParamStore::new(DType::F32, 0);
        let g = Generator::new(&store, small_cfg()).unwrap();
        let x = Tensor::zeros((2, 2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let plans = vec![make_fusion_plan(2, 0).unwrap()];
        assert!(matches!(g.encode(&x, &plans, Mode::Train), Err(Error::Contract(_))));
        let x = Tensor::zeros((1, 2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.encode(&x, &plans, Mode::Train), Err(Error::Shape(_))));
    }
}
