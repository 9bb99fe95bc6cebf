//! Episodic adversarial training on seen classes.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_file, read_checkpoint, write_checkpoint, CheckpointIndex, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::{Dataset, SplitManifest};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::fusion::{fuse_images, make_fusion_plan_with, FusionPlan, FusionSettings};
use crate::generator::Generator;
use crate::losses::{self, LossParts};
use crate::nn::{Adam, AdamConfig, Mode, ParamStore};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,l_adv_g,l_adv_d,l_cls_g,l_cls_d,l_fre,l_rec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_episodes: usize,
    pub lr: f64,
    /// `None` decays from the halfway point.
    pub decay_start_iteration: Option<usize>,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_episodes: 8,
            lr: 1e-4,
            decay_start_iteration: None,
            seed: 0,
            checkpoint_interval: 10_000,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn decay_start(&self) -> usize {
        self.decay_start_iteration.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_episodes == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("iterations, batch_episodes and checkpoint_interval must be positive".into()));
        }
        if self.decay_start() >= self.iterations {
            return Err(Error::Config(format!(
                "decay_start_iteration {} must be < iterations {}",
                self.decay_start(),
                self.iterations
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        Ok(())
    }
}

/// Constant until the decay start, then linear to zero at `iterations`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let start = cfg.decay_start();
    if step <= start {
        return cfg.lr;
    }
    let step = step.min(cfg.iterations);
    cfg.lr * (cfg.iterations - step) as f64 / (cfg.iterations - start) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Seen,
    Unseen,
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// `(K, C, H, W)`.
    pub images: Tensor,
    pub class_id: usize,
    pub source: Source,
    pub indices: Vec<usize>,
}

/// Uniform class among those with at least `k` images, then `k` distinct images.
pub fn sample_episode(dataset: &Dataset, k: usize, source: Source, rng: &mut impl Rng) -> Result<Episode> {
    if k < 2 {
        return Err(Error::Episode(format!("episodes need K >= 2, got {k}")));
    }
    dataset.warn_small_classes_once(k);
    let eligible: Vec<usize> = dataset
        .classes()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.images.len() >= k)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Episode(format!("no class has at least {k} images")));
    }
    let class = eligible[rng.random_range(0..eligible.len())];
    let n = dataset.classes()[class].images.len();
    let mut indices = sample(rng, n, k).into_vec();
    indices.sort_unstable();
    let images: Vec<Tensor> = indices.iter().map(|i| dataset.image(class, *i).clone()).collect();
    Ok(Episode {
        images: Tensor::stack(&images, 0)?,
        class_id: dataset.classes()[class].label,
        source,
        indices,
    })
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub parts: LossParts,
    pub total_g: f64,
    pub total_d: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, p.adv_g, p.adv_d, p.cls_g, p.cls_d, p.fre, p.rec
        )
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<(usize, LossParts)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |j: usize| -> Result<f64> {
            f.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}:{}: malformed metrics row", path.display(), i + 1)))
        };
        let step = f[0]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad step", path.display(), i + 1)))?;
        rows.push((
            step,
            LossParts {
                adv_g: num(1)?,
                adv_d: num(2)?,
                cls_g: num(3)?,
                cls_d: num(4)?,
                fre: num(5)?,
                rec: num(6)?,
            },
        ));
    }
    Ok(rows)
}

/// Generator, discriminator and their optimizers for one run.
pub struct Trainer {
    cfg: RunConfig,
    num_classes: usize,
    gen_store: ParamStore,
    disc_store: ParamStore,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        Self::with_dtype(cfg, num_classes, DType::F32)
    }

    pub fn with_dtype(cfg: &RunConfig, num_classes: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let gen_store = ParamStore::new(dtype, seed.wrapping_mul(2).wrapping_add(1));
        let disc_store = ParamStore::new(dtype, seed.wrapping_mul(2).wrapping_add(2));
        let generator = Generator::new(&gen_store, cfg.generator.clone())?;
        let g = &cfg.generator;
        let discriminator = Discriminator::new(&disc_store, &cfg.discriminator, g.image_channels, g.image_size, num_classes)?;
        let adam = AdamConfig {
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            ..Default::default()
        };
        Ok(Self {
            opt_g: Adam::new(&gen_store, adam)?,
            opt_d: Adam::new(&disc_store, adam)?,
            cfg: cfg.clone(),
            num_classes,
            gen_store,
            disc_store,
            generator,
            discriminator,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn discriminator_store(&self) -> &ParamStore {
        &self.disc_store
    }

    fn fusion_settings(&self) -> FusionSettings {
        FusionSettings {
            fraction: self.cfg.generator.fusion_fraction,
            top_n: self.cfg.generator.fusion_top_n,
        }
    }

    /// The episodes and fusion plans of training step `step`; a pure
    /// function of the seed and the step index.
    pub fn sample_batch(&self, dataset: &Dataset, step: usize) -> Result<(Vec<Episode>, Vec<FusionPlan>)> {
        let mut rng = step_rng(self.cfg.train.seed, step);
        let k = self.cfg.generator.shots;
        let mut episodes = Vec::with_capacity(self.cfg.train.batch_episodes);
        let mut plans = Vec::with_capacity(self.cfg.train.batch_episodes);
        for _ in 0..self.cfg.train.batch_episodes {
            episodes.push(sample_episode(dataset, k, Source::Seen, &mut rng)?);
            plans.push(make_fusion_plan_with(k, rng.random(), self.fusion_settings())?);
        }
        Ok((episodes, plans))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, episodes: &[Episode], plans: &[FusionPlan]) -> Result<StepMetrics> {
        if episodes.is_empty() || episodes.len() != plans.len() {
            return Err(Error::Contract(format!("{} episodes with {} plans", episodes.len(), plans.len())));
        }
        let dtype = self.gen_store.dtype();
        let w = self.cfg.loss;
        let k = self.cfg.generator.shots;
        let lr = lr_schedule(self.step, &self.cfg.train);

        let stacked: Vec<Tensor> = episodes.iter().map(|e| e.images.clone()).collect();
        let images = Tensor::stack(&stacked, 0)?.to_dtype(dtype)?;
        let (b, _, c, h, wd) = images.dims5()?;
        let real = images.reshape((b * k, c, h, wd))?;
        let episode_labels: Vec<usize> = episodes.iter().map(|e| e.class_id).collect();
        let real_labels: Vec<usize> = episode_labels.iter().flat_map(|l| std::iter::repeat(*l).take(k)).collect();

        let (fake, trace) = self.generator.forward(&images, plans, Mode::Train)?;

        // discriminator
        let d_real = self.discriminator.discriminate(&real)?;
        let d_fake = self.discriminator.discriminate(&fake.detach())?;
        let adv_d = losses::hinge_d(&d_real.adv_score, &d_fake.adv_score)?;
        let cls_d = losses::classification_loss(&d_real.class_logits, &real_labels)?;
        let loss_d = losses::total_d(&adv_d, &cls_d, &w)?;
        let mut parts = LossParts {
            adv_d: losses::scalar(&adv_d)?,
            cls_d: losses::scalar(&cls_d)?,
            ..Default::default()
        };
        let total_d = losses::scalar(&loss_d)?;
        self.check_finite(&parts, &[("l_adv_d", parts.adv_d), ("l_cls_d", parts.cls_d), ("total_d", total_d)])?;
        let grads = loss_d.backward()?;
        self.opt_d.step(&grads, lr)?;

        // generator
        let d_gen = self.discriminator.discriminate(&fake)?;
        let adv_g = losses::hinge_g(&d_gen.adv_score)?;
        let cls_g = losses::classification_loss(&d_gen.class_logits, &episode_labels)?;
        let base_rows: Vec<u32> = trace
            .plans
            .iter()
            .enumerate()
            .map(|(e, p)| (e * k + p.base_index) as u32)
            .collect();
        let base_images = real.index_select(&Tensor::new(base_rows.as_slice(), real.device())?, 0)?;
        let fre = losses::frequency_l1(&base_images, &fake)?;
        let targets = episodes
            .iter()
            .zip(&trace.plans)
            .map(|(e, p)| fuse_images(&e.images.to_dtype(dtype)?, p))
            .collect::<Result<Vec<_>>>()?;
        let rec = losses::local_reconstruction(&fake, &Tensor::stack(&targets, 0)?)?;
        let loss_g = losses::total_g(&adv_g, &cls_g, &fre, &rec, &w)?;
        parts.adv_g = losses::scalar(&adv_g)?;
        parts.cls_g = losses::scalar(&cls_g)?;
        parts.fre = losses::scalar(&fre)?;
        parts.rec = losses::scalar(&rec)?;
        let total_g = losses::scalar(&loss_g)?;
        self.check_finite(
            &parts,
            &[
                ("l_adv_g", parts.adv_g),
                ("l_cls_g", parts.cls_g),
                ("l_fre", parts.fre),
                ("l_rec", parts.rec),
                ("total_g", total_g),
            ],
        )?;
        let grads = loss_g.backward()?;
        self.opt_g.step(&grads, lr)?;

        let metrics = StepMetrics {
            step: self.step,
            lr,
            parts,
            total_g,
            total_d,
        };
        self.step += 1;
        Ok(metrics)
    }

    fn check_finite(&self, parts: &LossParts, values: &[(&'static str, f64)]) -> Result<()> {
        if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            let dump = parts
                .named()
                .iter()
                .map(|(n, v)| format!("{n}={v}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::NonFinite {
                step: self.step,
                component: name,
                value: *v,
                dump,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, is_final: bool) -> Result<()> {
        let mut tensors = self.gen_store.export("g")?;
        tensors.extend(self.disc_store.export("d")?);
        tensors.extend(self.opt_g.export("opt_g"));
        tensors.extend(self.opt_d.export("opt_d"));
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            variant: self.cfg.generator.variant,
            num_classes: self.num_classes,
            is_final,
            config: self.cfg.clone(),
        };
        write_checkpoint(path, &meta, &tensors)
    }

    /// Rebuilds a trainer from a checkpoint, restoring optimizer state.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_checkpoint(path)?;
        let mut cfg = meta.config.clone();
        cfg.generator.variant = meta.variant;
        let mut trainer = Self::new(&cfg, meta.num_classes)?;
        trainer.gen_store.import("g", &tensors)?;
        trainer.disc_store.import("d", &tensors)?;
        trainer.opt_g.import("opt_g", &tensors, meta.step as u64)?;
        trainer.opt_d.import("opt_d", &tensors, meta.step as u64)?;
        trainer.step = meta.step;
        Ok(trainer)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_id: String,
    /// Continue from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this many total steps without marking a final checkpoint.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub run_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub metrics: Vec<StepMetrics>,
    pub resumed_from: Option<usize>,
}

/// Rejects datasets holding any class that is not a seen class of `manifest`.
pub fn check_seen_only(dataset: &Dataset, manifest: &SplitManifest) -> Result<()> {
    let seen = manifest.seen_names();
    let leaked: Vec<String> = dataset
        .class_names()
        .into_iter()
        .filter(|n| !seen.contains(n))
        .collect();
    if !leaked.is_empty() {
        return Err(Error::SplitLeak(format!("training data contains non-seen classes {leaked:?}")));
    }
    Ok(())
}

fn truncate_metrics(path: &Path, before_step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = read_metrics(path)?
        .into_iter()
        .filter(|(s, _)| *s < before_step)
        .map(|(step, parts)| {
            StepMetrics {
                step,
                lr: 0.0,
                parts,
                total_g: 0.0,
                total_d: 0.0,
            }
            .csv_row()
        })
        .collect();
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in kept {
        text.push_str(&row);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run_training(dataset: &Dataset, manifest: &SplitManifest, cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> Result<TrainingOutcome> {
    check_seen_only(dataset, manifest)?;
    if dataset.num_classes() != manifest.seen().count() {
        return Err(Error::Data(format!(
            "dataset has {} classes, manifest lists {} seen classes",
            dataset.num_classes(),
            manifest.seen().count()
        )));
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let metrics_path = run_dir.join(METRICS_FILE);

    let mut index = CheckpointIndex::read(run_dir)?.unwrap_or_else(|| CheckpointIndex::new(&opts.run_id));
    let (mut trainer, resumed_from) = match (opts.resume, index.latest()) {
        (true, Some(entry)) => {
            let t = Trainer::load(&run_dir.join(&entry.file))?;
            if t.config() != cfg {
                return Err(Error::Config("resume config differs from the checkpointed config".into()));
            }
            log::info!("resuming from step {}", t.step());
            let step = t.step();
            (t, Some(step))
        }
        _ => {
            index = CheckpointIndex::new(&opts.run_id);
            (Trainer::new(cfg, dataset.num_classes())?, None)
        }
    };
    match resumed_from {
        Some(step) => truncate_metrics(&metrics_path, step)?,
        None => fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?,
    }
    let mut csv = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let total = cfg.train.iterations;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut outcome = TrainingOutcome {
        run_dir: run_dir.to_path_buf(),
        checkpoints: Vec::new(),
        final_checkpoint: None,
        metrics: Vec::new(),
        resumed_from,
    };
    while trainer.step() < stop {
        let (episodes, plans) = trainer.sample_batch(dataset, trainer.step())?;
        let m = trainer.train_step(&episodes, &plans)?;
        writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        if m.step % 100 == 0 {
            log::info!(
                "step {} lr {:.2e} L_D {:.4} L_G {:.4} (adv_d {:.4} fre {:.4} rec {:.4})",
                m.step, m.lr, m.total_d, m.total_g, m.parts.adv_d, m.parts.fre, m.parts.rec
            );
        }
        outcome.metrics.push(m);
        let done = trainer.step();
        let is_final = done == total;
        if done % cfg.train.checkpoint_interval == 0 || is_final || done == stop {
            let file = checkpoint_file(done);
            let path = run_dir.join(&file);
            trainer.save(&path, is_final)?;
            index.record(done, &file, is_final);
            index.write(run_dir)?;
            if is_final {
                outcome.final_checkpoint = Some(path.clone());
            }
            outcome.checkpoints.push(path);
        }
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if outcome.final_checkpoint.is_none() {
        outcome.final_checkpoint = index.final_checkpoint().map(|e| run_dir.join(&e.file));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LoadedClass};
    use candle_core::Device;

    fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
        let dev = Device::Cpu;
        Dataset::from_classes(
            (0..classes)
                .map(|c| LoadedClass {
                    name: format!("c{c}"),
                    label: c,
                    images: (0..per_class)
                        .map(|i| {
                            let v = (c * 10 + i) as f32 / 100.0;
                            (format!("{i}.png"), Tensor::full(v, (3, 16, 16), &dev).unwrap())
                        })
                        .collect(),
                })
                .collect(),
        )
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(50_000, &cfg), 1e-4);
        assert_eq!(lr_schedule(100_000, &cfg), 0.0);
        assert!((lr_schedule(75_000, &cfg) - 0.5e-4).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in (0..=100_000).step_by(997) {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
        let bad = TrainConfig { decay_start_iteration: Some(100_000), ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn episodes() {
        let ds = toy_dataset(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = sample_episode(&ds, 3, Source::Seen, &mut rng).unwrap();
        assert_eq!(e.images.dims(), &[3, 3, 16, 16]);
        let mut idx = e.indices.clone();
        idx.dedup();
        assert_eq!(idx.len(), 3);

        let a = sample_episode(&ds, 3, Source::Seen, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_episode(&ds, 3, Source::Seen, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!((a.class_id, a.indices), (b.class_id, b.indices));

        let exact = toy_dataset(3, 3);
        let e = sample_episode(&exact, 3, Source::Seen, &mut rng).unwrap();
        assert_eq!(e.indices, vec![0, 1, 2]);

        assert!(matches!(sample_episode(&exact, 4, Source::Seen, &mut rng), Err(Error::Episode(_))));
    }

    #[test]
    fn small_classes_are_excluded() {
        let mut classes = toy_dataset(2, 5).classes().to_vec();
        classes[0].images.truncate(2);
        let ds = Dataset::from_classes(classes);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_episode(&ds, 3, Source::Seen, &mut rng).unwrap().class_id, 1);
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut cfg = RunConfig::default();
        cfg.generator.image_size = 16;
        cfg.generator.encoder_channels = vec![4, 8, 8, 8, 8];
        cfg.discriminator.stem_channels = 4;
        cfg.discriminator.block_channels = vec![4, 4, 8, 8];
        cfg.train.lr = 0.0;
        cfg.train.batch_episodes = 2;
        let ds = toy_dataset(3, 4);
        let mut t = Trainer::new(&cfg, 3).unwrap();
        let before: Vec<Vec<f32>> = t
            .generator_store()
            .trainable()
            .iter()
            .chain(t.discriminator_store().trainable().iter())
            .map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect();
        let (eps, plans) = t.sample_batch(&ds, 0).unwrap();
        let m = t.train_step(&eps, &plans).unwrap();
        assert_eq!(m.lr, 0.0);
        let after: Vec<Vec<f32>> = t
            .generator_store()
            .trainable()
            .iter()
            .chain(t.discriminator_store().trainable().iter())
            .map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn leaked_class_rejected() {
        let ds = toy_dataset(3, 4);
        let manifest = crate::data::build_manifest_from_listing(
            &(0..3).map(|c| (format!("c{c}"), vec!["0.png".into(), "1.png".into()])).collect::<Vec<_>>(),
            2,
            1,
            0.5,
            0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_training(&ds, &manifest, &RunConfig::default(), dir.path(), &RunOptions::default());
        assert!(matches!(err, Err(Error::SplitLeak(_))));
    }
}
