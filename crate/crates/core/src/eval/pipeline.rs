//! Train, generate from unseen support sets, and score against unseen queries.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Partition, ReadLog, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::metrics::{fid_from_embeddings, lpips_proxy_from_embeddings, FeatureExtractor, RandomConvEmbedder};
use crate::eval::{generate_set, GenerationSet};
use crate::generator::Variant;
use crate::train::{run_training, RunOptions, Trainer};

/// The three partitions a pipeline run touches, loaded once.
pub struct PipelineData {
    pub manifest: SplitManifest,
    pub seen: Dataset,
    pub support: Dataset,
    pub query: Dataset,
}

impl PipelineData {
    /// Each partition gets its own read log when `logs` is set.
    pub fn load(root: &Path, manifest: SplitManifest, image_size: usize, logs: Option<[ReadLog; 3]>) -> Result<Self> {
        manifest.validate()?;
        let [l_seen, l_sup, l_que] = match logs {
            Some([a, b, c]) => [Some(a), Some(b), Some(c)],
            None => [None, None, None],
        };
        let (seen, s0) = Dataset::load(root, &manifest, Partition::Seen, image_size, l_seen)?;
        let (support, s1) = Dataset::load(root, &manifest, Partition::UnseenSupport, image_size, l_sup)?;
        let (query, s2) = Dataset::load(root, &manifest, Partition::UnseenQuery, image_size, l_que)?;
        let skipped = s0.len() + s1.len() + s2.len();
        if skipped > 0 {
            log::warn!("{skipped} images could not be decoded and were skipped");
        }
        Ok(Self {
            manifest,
            seen,
            support,
            query,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub fid: f64,
    pub lpips_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub shots: usize,
    pub fid: f64,
    pub lpips_proxy: f64,
    pub fid_regularized: bool,
    pub embedder: String,
    pub per_class: Vec<ClassScore>,
}

impl Scores {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("summary.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let mut csv = String::from("class,fid,lpips_proxy\n");
        for c in &self.per_class {
            csv.push_str(&format!("{},{},{}\n", c.name, c.fid, c.lpips_proxy));
        }
        csv.push_str(&format!("all,{},{}\n", self.fid, self.lpips_proxy));
        let path = dir.join("metrics.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }
}

fn class_tensor(ds: &Dataset, class: usize) -> Result<Tensor> {
    let n = ds.classes()[class].images.len();
    let imgs: Vec<Tensor> = (0..n).map(|i| ds.image(class, i).clone()).collect();
    Ok(Tensor::stack(&imgs, 0)?)
}

/// FID of all generated images against all query images, LPIPS proxy averaged
/// over classes, and both per class.
pub fn score_set(set: &GenerationSet, query: &Dataset, extractor: &dyn FeatureExtractor, eps: f64) -> Result<Scores> {
    let mut gen_all = Vec::new();
    let mut real_all = Vec::new();
    let mut per_class = Vec::new();
    for class in &set.classes {
        let qi = query
            .classes()
            .iter()
            .position(|c| c.name == class.name)
            .ok_or_else(|| Error::Data(format!("class {} has no query images", class.name)))?;
        let g = extractor.embed(&class.images)?;
        let r = extractor.embed(&class_tensor(query, qi)?)?;
        let fid = fid_from_embeddings(&g, &r, eps)?.fid;
        let lp = if g.len() > 1 { lpips_proxy_from_embeddings(&g)? } else { f64::NAN };
        per_class.push(ClassScore {
            name: class.name.clone(),
            fid,
            lpips_proxy: lp,
        });
        gen_all.extend(g);
        real_all.extend(r);
    }
    if per_class.is_empty() {
        return Err(Error::Metric("no class could be generated".into()));
    }
    let report = fid_from_embeddings(&gen_all, &real_all, eps)?;
    let lp = per_class.iter().map(|c| c.lpips_proxy).sum::<f64>() / per_class.len() as f64;
    Ok(Scores {
        variant: set.provenance.variant,
        shots: set.provenance.shots,
        fid: report.fid,
        lpips_proxy: lp,
        fid_regularized: report.regularized,
        embedder: extractor.name().to_string(),
        per_class,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub checkpoint: PathBuf,
    pub scores: Scores,
}

/// Trains under `{run_dir}/train`, generates from the final checkpoint and
/// writes `summary.json` and `metrics.csv` into `run_dir`.
pub fn run_pipeline(data: &PipelineData, cfg: &RunConfig, run_dir: &Path, run_id: &str) -> Result<PipelineResult> {
    let train_dir = run_dir.join("train");
    let opts = RunOptions {
        run_id: run_id.to_string(),
        resume: true,
        stop_after: None,
    };
    let outcome = run_training(&data.seen, &data.manifest, cfg, &train_dir, &opts)?;
    let checkpoint = outcome
        .final_checkpoint
        .ok_or_else(|| Error::Checkpoint("training finished without a final checkpoint".into()))?;
    let trainer = Trainer::load(&checkpoint)?;
    let set = generate_set(
        trainer.generator(),
        &data.support,
        cfg.generator.shots,
        cfg.eval.n_per_class,
        cfg.eval.generation_seed,
        cfg.eval.generation_batch,
        &checkpoint.display().to_string(),
    )?;
    let embedder = RandomConvEmbedder::new(cfg.generator.image_channels, cfg.eval.embed_seed)?;
    let scores = score_set(&set, &data.query, &embedder, cfg.eval.fid_eps)?;
    scores.write(run_dir)?;
    Ok(PipelineResult { checkpoint, scores })
}
