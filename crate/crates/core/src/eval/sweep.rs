//! Shot sweeps and ablation grids built on the pipeline.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::pipeline::{run_pipeline, PipelineData};
use crate::fusion::make_fusion_plan;
use crate::generator::{Generator, Variant};
use crate::nn::{Mode, ParamStore};
use crate::train::Trainer;

/// Builds both aggregation variants over the weights of `source` and checks
/// that they produce identical outputs when every episode member is the same
/// image. Both train and eval modes are checked.
pub fn variants_agree_on_duplicates(source: &ParamStore, cfg: &crate::generator::GeneratorConfig, k: usize, seed: u64) -> Result<bool> {
    let weights = source.export("g")?;
    let build = |variant: Variant| -> Result<(ParamStore, Generator)> {
        let mut c = cfg.clone();
        c.variant = variant;
        c.shots = k;
        let store = ParamStore::new(source.dtype(), 0);
        let g = Generator::new(&store, c)?;
        store.import("g", &weights)?;
        Ok((store, g))
    };
    let (_, mean) = build(Variant::Mean)?;
    let (_, base) = build(Variant::BaseIndex)?;
    let s = cfg.image_size;
    let episodes = 2;
    let single = Tensor::rand(-1f32, 1.0, (episodes, 1, cfg.image_channels, s, s), source.device())?.to_dtype(source.dtype())?;
    let images = single.repeat((1, k, 1, 1, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = (0..episodes)
        .map(|_| make_fusion_plan(k, rand::Rng::random(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    for mode in [Mode::Eval, Mode::Train] {
        let (a, _) = mean.forward(&images, &plans, mode)?;
        let (b, _) = base.forward(&images, &plans, mode)?;
        let a = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let b = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if a != b {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub shots: usize,
    pub fid: Option<f64>,
    pub lpips_proxy: Option<f64>,
    pub duplicate_equal: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Population variance of FID across K, per variant, over completed rows.
    pub fid_variance: Vec<(Variant, f64)>,
}

impl SweepReport {
    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("variant,K,fid,lpips_proxy,duplicate_equal,error\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant.label(),
                r.shots,
                opt(r.fid),
                opt(r.lpips_proxy),
                r.duplicate_equal.map(|b| b.to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("sweep.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("sweep.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Runs the pipeline for every (variant, K). A failing cell is recorded and
/// the sweep continues; the partial table is always written.
pub fn shot_sweep(data: &PipelineData, base: &RunConfig, shots: &[usize], variants: &[Variant], out: &Path) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &k in shots {
            let mut cfg = base.clone();
            cfg.generator.variant = variant;
            cfg.generator.shots = k;
            let dir = out.join(format!("{}_k{k}", variant.label()));
            let result = run_pipeline(data, &cfg, &dir, &format!("{}_k{k}", variant.label())).and_then(|r| {
                let trainer = Trainer::load(&r.checkpoint)?;
                let dup = variants_agree_on_duplicates(trainer.generator_store(), &cfg.generator, k, cfg.train.seed)?;
                Ok((r, dup))
            });
            let row = match result {
                Ok((r, dup)) => SweepRow {
                    variant,
                    shots: k,
                    fid: Some(r.scores.fid),
                    lpips_proxy: Some(r.scores.lpips_proxy),
                    duplicate_equal: Some(dup),
                    error: None,
                },
                Err(e) => {
                    log::error!("sweep cell {} K={k} failed: {e}", variant.label());
                    SweepRow {
                        variant,
                        shots: k,
                        fid: None,
                        lpips_proxy: None,
                        duplicate_equal: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            rows.push(row);
            let partial = SweepReport {
                rows: rows.clone(),
                fid_variance: Vec::new(),
            };
            partial.write(out)?;
        }
    }
    let fid_variance = variants
        .iter()
        .map(|&v| {
            let fids: Vec<f64> = rows.iter().filter(|r| r.variant == v).filter_map(|r| r.fid).collect();
            (v, variance(&fids))
        })
        .collect();
    let report = SweepReport { rows, fid_variance };
    report.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    WithoutLof,
    WithoutLl,
    WithoutHl,
    WithoutL1,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::WithoutLof,
        Ablation::WithoutLl,
        Ablation::WithoutHl,
        Ablation::WithoutL1,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutLof => "w/o LoF",
            Ablation::WithoutLl => "w/o LL",
            Ablation::WithoutHl => "w/o HL",
            Ablation::WithoutL1 => "w/o L1 loss",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutLof => "wo_lof",
            Ablation::WithoutLl => "wo_ll",
            Ablation::WithoutHl => "wo_hl",
            Ablation::WithoutL1 => "wo_l1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.slug() == s || a.label() == s)
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::WithoutLof => c.generator.use_lof = false,
            Ablation::WithoutLl => c.generator.use_ll_skip = false,
            Ablation::WithoutHl => c.generator.use_hf_skip = false,
            Ablation::WithoutL1 => c.loss.lambda_fre = 0.0,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: Ablation,
    pub seeds: Vec<u64>,
    pub fid: Vec<f64>,
    pub lpips_proxy: Vec<f64>,
}

impl AblationRow {
    pub fn mean_fid(&self) -> f64 {
        self.fid.iter().sum::<f64>() / self.fid.len().max(1) as f64
    }

    pub fn mean_lpips(&self) -> f64 {
        self.lpips_proxy.iter().sum::<f64>() / self.lpips_proxy.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, c: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    /// Rows are conditions; columns are mean proxy FID and mean perceptual proxy,
    /// followed by the per-seed FIDs.
    pub fn to_csv(&self) -> String {
        let seeds = self.rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
        let mut s = String::from("condition,fid,lpips_proxy");
        for seed in &seeds {
            s.push_str(&format!(",fid_seed{seed}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}", r.condition.label(), r.mean_fid(), r.mean_lpips()));
            for f in &r.fid {
                s.push_str(&format!(",{f}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// One pipeline run per (condition, seed); the seed drives training and generation.
pub fn ablate(data: &PipelineData, base: &RunConfig, conditions: &[Ablation], seeds: &[u64], out: &Path) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &condition in conditions {
        let mut row = AblationRow {
            condition,
            seeds: seeds.to_vec(),
            fid: Vec::new(),
            lpips_proxy: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = condition.apply(base);
            cfg.train.seed = seed;
            cfg.eval.generation_seed = seed;
            let id = format!("{}_seed{seed}", condition.slug());
            let r = run_pipeline(data, &cfg, &out.join(&id), &id)?;
            log::info!("{} seed {seed}: proxy FID {:.4}", condition.label(), r.scores.fid);
            row.fid.push(r.scores.fid);
            row.lpips_proxy.push(r.scores.lpips_proxy);
        }
        rows.push(row);
    }
    let table = AblationTable { rows };
    table.write(out)?;
    Ok(table)
}
