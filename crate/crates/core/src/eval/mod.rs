//! Unseen-class generation and the measurements made on it.

pub mod classify;
pub mod metrics;
pub mod pipeline;
pub mod sweep;
pub mod visualize;

use std::fs;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, save_image, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{make_fusion_plan_with, FusionSettings};
use crate::generator::{Generator, Variant};
use crate::nn::Mode;

pub use classify::{augment_classify, ClassifyConfig, ClassifyTable};
pub use metrics::{compute_fid, lpips_proxy, FeatureExtractor, FidReport, RandomConvEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated images per unseen class.
    pub n_per_class: usize,
    pub generation_seed: u64,
    /// Episodes per generator forward pass.
    pub generation_batch: usize,
    pub embed_seed: u64,
    pub fid_eps: f64,
    pub classify: ClassifyConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_class: 128,
            generation_seed: 0,
            generation_batch: 16,
            embed_seed: 2024,
            fid_eps: 1e-6,
            classify: ClassifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub seed: u64,
    pub variant: Variant,
    pub shots: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedClass {
    pub name: String,
    /// `(N, C, S, S)`.
    pub images: Tensor,
    /// Support indices fed to the generator, one list per image.
    pub episodes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GenerationSet {
    pub provenance: Provenance,
    pub classes: Vec<GeneratedClass>,
}

impl GenerationSet {
    pub fn per_class(&self) -> usize {
        self.classes.first().map(|c| c.images.dims()[0]).unwrap_or(0)
    }

    pub fn all_images(&self) -> Result<Tensor> {
        let parts: Vec<Tensor> = self.classes.iter().map(|c| c.images.clone()).collect();
        if parts.is_empty() {
            return Err(Error::Metric("generation set is empty".into()));
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// `{dir}/{class}/{i}.png` plus `generation.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for class in &self.classes {
            let cdir = dir.join(&class.name);
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for i in 0..class.images.dims()[0] {
                save_image(&class.images.get(i)?, &cdir.join(format!("{i:04}.png")))?;
            }
        }
        let record = serde_json::json!({
            "provenance": self.provenance,
            "per_class": self.per_class(),
            "classes": self.classes.iter().map(|c| serde_json::json!({
                "name": c.name,
                "episodes": c.episodes,
            })).collect::<Vec<_>>(),
        });
        let path = dir.join("generation.json");
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, image_size: usize) -> Result<Self> {
        let path = dir.join("generation.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: serde_json::Value = serde_json::from_str(&text)?;
        let provenance: Provenance = serde_json::from_value(record["provenance"].clone())?;
        let n = record["per_class"].as_u64().unwrap_or(0) as usize;
        let mut classes = Vec::new();
        for entry in record["classes"].as_array().into_iter().flatten() {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| Error::Data(format!("{}: class without a name", path.display())))?
                .to_string();
            let episodes: Vec<Vec<usize>> = serde_json::from_value(entry["episodes"].clone())?;
            let images = (0..n)
                .map(|i| load_image(&dir.join(&name).join(format!("{i:04}.png")), image_size))
                .collect::<Result<Vec<_>>>()?;
            classes.push(GeneratedClass {
                name,
                images: Tensor::stack(&images, 0)?,
                episodes,
            });
        }
        Ok(Self { provenance, classes })
    }
}

/// For every class of `support` with at least `k` images, draws seeded
/// `k`-shot episodes and generates one image per episode until `n` exist.
/// Classes with fewer than `k` images are skipped with a warning.
pub fn generate_set(generator: &Generator, support: &Dataset, k: usize, n: usize, seed: u64, batch: usize, checkpoint: &str) -> Result<GenerationSet> {
    if n == 0 || batch == 0 {
        return Err(Error::Config("generation needs n >= 1 and batch >= 1".into()));
    }
    let cfg = generator.config();
    if k != cfg.shots {
        log::debug!("generating with K = {k}, model trained with K = {}", cfg.shots);
    }
    let settings = FusionSettings {
        fraction: cfg.fusion_fraction,
        top_n: cfg.fusion_top_n,
    };
    let dtype = generator.dtype();
    let mut classes = Vec::new();
    for (ci, class) in support.classes().iter().enumerate() {
        let available = class.images.len();
        if available < k {
            log::warn!("class {} has {available} support images, need {k}; skipped", class.name);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        let mut outputs = Vec::new();
        let mut episodes = Vec::new();
        while episodes.len() < n {
            let count = batch.min(n - episodes.len());
            let mut inputs = Vec::with_capacity(count);
            let mut plans = Vec::with_capacity(count);
            for _ in 0..count {
                let mut idx = sample(&mut rng, available, k).into_vec();
                idx.sort_unstable();
                let imgs: Vec<Tensor> = idx.iter().map(|&i| support.image(ci, i).clone()).collect();
                inputs.push(Tensor::stack(&imgs, 0)?);
                plans.push(make_fusion_plan_with(k, rng.random(), settings)?);
                episodes.push(idx);
            }
            let x = Tensor::stack(&inputs, 0)?.to_dtype(dtype)?;
            let (out, _) = generator.forward(&x, &plans, Mode::Eval)?;
            outputs.push(out.detach());
        }
        classes.push(GeneratedClass {
            name: class.name.clone(),
            images: Tensor::cat(&outputs, 0)?,
            episodes,
        });
    }
    Ok(GenerationSet {
        provenance: Provenance {
            checkpoint: checkpoint.to_string(),
            seed,
            variant: cfg.variant,
            shots: k,
        },
        classes,
    })
}
