//! Downstream classification on unseen classes, with and without augmentation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::eval::GenerationSet;
use crate::losses::classification_loss;
use crate::nn::{Adam, AdamConfig, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub aug_per_class: usize,
    /// Steps of pretraining on seen classes; 0 skips it.
    pub pretrain_iterations: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            train_per_class: 10,
            val_per_class: 15,
            test_per_class: 15,
            aug_per_class: 30,
            pretrain_iterations: 200,
            iterations: 300,
            batch: 4,
            lr: 2e-4,
            eval_interval: 50,
            seed: 0,
        }
    }
}

/// Source of extra training images for one condition.
#[derive(Debug, Clone, Copy)]
pub enum Augmentation<'a> {
    None,
    Generated(&'a GenerationSet),
    /// Exact copies of the training images; the no-information control.
    Copies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRow {
    pub condition: String,
    pub dataset: String,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub train_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyTable {
    pub classes: Vec<String>,
    pub excluded: Vec<String>,
    pub rows: Vec<ClassifyRow>,
}

impl ClassifyTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,dataset,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.condition, r.dataset, r.accuracy));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("classification.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("classification.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

struct Split {
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Split {
    fn new() -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn push(&mut self, t: Tensor, label: usize) {
        self.images.push(t);
        self.labels.push(label);
    }
}

fn build_classifier(store: &ParamStore, cfg: &DiscriminatorConfig, channels: usize, size: usize, classes: usize) -> Result<Discriminator> {
    Discriminator::new(store, cfg, channels, size, classes)
}

fn fit(model: &Discriminator, store: &ParamStore, data: &Split, iterations: usize, cfg: &ClassifyConfig, seed: u64, mut on_eval: impl FnMut(&Discriminator) -> Result<()>) -> Result<()> {
    let mut opt = Adam::new(store, AdamConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..iterations {
        if order.len() < cfg.batch {
            let mut fresh: Vec<usize> = (0..data.images.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch.min(order.len())).collect();
        let x = Tensor::stack(&idx.iter().map(|&i| data.images[i].clone()).collect::<Vec<_>>(), 0)?.to_dtype(store.dtype())?;
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let loss = classification_loss(&model.discriminate(&x)?.class_logits, &y)?;
        opt.step(&loss.backward()?, cfg.lr)?;
        if (step + 1) % cfg.eval_interval.max(1) == 0 || step + 1 == iterations {
            on_eval(model)?;
        }
    }
    Ok(())
}

fn accuracy(model: &Discriminator, data: &Split) -> Result<f64> {
    if data.images.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for chunk in data.images.chunks(64).zip(data.labels.chunks(64)) {
        let x = Tensor::stack(chunk.0, 0)?.to_dtype(DType::F32)?;
        let pred = model.discriminate(&x)?.class_logits.argmax(1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(chunk.1).filter(|(p, y)| **p as usize == **y).count();
    }
    Ok(correct as f64 / data.images.len() as f64)
}

/// Trains one classifier per condition from the same initialisation and
/// reports test accuracy at the best validation step. Training images come
/// from the support partition, validation and test images from the query
/// partition. Classes short of any count are excluded from every condition.
pub fn augment_classify(
    seen: Option<&Dataset>,
    support: &Dataset,
    query: &Dataset,
    conditions: &[(&str, Augmentation<'_>)],
    dataset_name: &str,
    disc_cfg: &DiscriminatorConfig,
    cfg: &ClassifyConfig,
) -> Result<ClassifyTable> {
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for (si, class) in support.classes().iter().enumerate() {
        let qi = query.classes().iter().position(|c| c.name == class.name);
        match qi {
            Some(qi)
                if class.images.len() >= cfg.train_per_class
                    && query.classes()[qi].images.len() >= cfg.val_per_class + cfg.test_per_class =>
            {
                classes.push((class.name.clone(), si, qi))
            }
            _ => excluded.push(class.name.clone()),
        }
    }
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "classification needs at least 2 eligible classes, found {} (excluded {excluded:?})",
            classes.len()
        )));
    }
    if !excluded.is_empty() {
        log::warn!("excluded from classification: {excluded:?}");
    }
    let (mut train, mut val, mut test) = (Split::new(), Split::new(), Split::new());
    for (label, (_, si, qi)) in classes.iter().enumerate() {
        for i in 0..cfg.train_per_class {
            train.push(support.image(*si, i).clone(), label);
        }
        for i in 0..cfg.val_per_class {
            val.push(query.image(*qi, i).clone(), label);
        }
        for i in cfg.val_per_class..cfg.val_per_class + cfg.test_per_class {
            test.push(query.image(*qi, i).clone(), label);
        }
    }
    let any = support.classes().first().and_then(|c| c.images.first()).map(|(_, t)| t.dims().to_vec());
    let dims = any.ok_or_else(|| Error::Data("support set is empty".into()))?;
    let (channels, size) = (dims[0], dims[1]);

    let mut init: HashMap<String, Tensor> = HashMap::new();
    if let Some(seen) = seen.filter(|_| cfg.pretrain_iterations > 0) {
        let store = ParamStore::new(DType::F32, cfg.seed);
        let model = build_classifier(&store, disc_cfg, channels, size, seen.num_classes())?;
        let mut data = Split::new();
        for (ci, c) in seen.classes().iter().enumerate() {
            for i in 0..c.images.len() {
                data.push(seen.image(ci, i).clone(), c.label);
            }
        }
        fit(&model, &store, &data, cfg.pretrain_iterations, cfg, cfg.seed, |_| Ok(()))?;
        init = store.export("c")?;
        init.retain(|k, _| !k.starts_with("c.cls."));
    }

    let mut rows = Vec::new();
    for (name, aug) in conditions {
        let mut data = Split {
            images: train.images.clone(),
            labels: train.labels.clone(),
        };
        match aug {
            Augmentation::None => {}
            Augmentation::Copies => {
                for (label, (_, si, _)) in classes.iter().enumerate() {
                    for j in 0..cfg.aug_per_class {
                        data.push(support.image(*si, j % cfg.train_per_class.max(1)).clone(), label);
                    }
                }
            }
            Augmentation::Generated(set) => {
                for (label, (cname, _, _)) in classes.iter().enumerate() {
                    let Some(g) = set.classes.iter().find(|c| &c.name == cname) else {
                        continue;
                    };
                    let n = cfg.aug_per_class.min(g.images.dims()[0]);
                    for j in 0..n {
                        data.push(g.images.get(j)?.to_dtype(DType::F32)?, label);
                    }
                }
            }
        }
        let store = ParamStore::new(DType::F32, cfg.seed.wrapping_add(1));
        let model = build_classifier(&store, disc_cfg, channels, size, classes.len())?;
        for (key, var) in store.all() {
            if let Some(t) = init.get(&format!("c.{key}")) {
                var.set(t)?;
            }
        }
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        fit(&model, &store, &data, cfg.iterations, cfg, cfg.seed.wrapping_add(2), |m| {
            let v = accuracy(m, &val)?;
            if v > best.0 {
                best = (v, accuracy(m, &test)?);
            }
            Ok(())
        })?;
        rows.push(ClassifyRow {
            condition: name.to_string(),
            dataset: dataset_name.to_string(),
            accuracy: best.1,
            val_accuracy: best.0,
            train_images: data.images.len(),
        });
    }
    Ok(ClassifyTable {
        classes: classes.into_iter().map(|c| c.0).collect(),
        excluded,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LoadedClass;
    use candle_core::Device;

    fn toy(prefix: &str, classes: usize, per: usize) -> Dataset {
        Dataset::from_classes(
            (0..classes)
                .map(|c| LoadedClass {
                    name: format!("c{c}"),
                    label: c,
                    images: (0..per)
                        .map(|i| {
                            let v = if c == 0 { -0.5f32 } else { 0.5 } + i as f32 * 0.01;
                            (format!("{prefix}{i}.png"), Tensor::full(v, (3, 16, 16), &Device::Cpu).unwrap())
                        })
                        .collect(),
                })
                .collect(),
        )
    }

    fn small() -> (DiscriminatorConfig, ClassifyConfig) {
        (
            DiscriminatorConfig {
                stem_channels: 4,
                block_channels: vec![4, 4, 8, 8],
                ..Default::default()
            },
            ClassifyConfig {
                train_per_class: 2,
                val_per_class: 2,
                test_per_class: 2,
                aug_per_class: 3,
                pretrain_iterations: 0,
                iterations: 6,
                batch: 2,
                eval_interval: 3,
                ..Default::default()
            },
        )
    }

    #[test]
    fn zero_augmentation_matches_base() {
        let (d, mut c) = small();
        let sup = toy("s", 2, 3);
        let que = toy("q", 2, 4);
        c.aug_per_class = 0;
        let t = augment_classify(None, &sup, &que, &[("base", Augmentation::None), ("copies", Augmentation::Copies)], "toy", &d, &c).unwrap();
        assert_eq!(t.rows[0].accuracy, t.rows[1].accuracy);
        assert_eq!(t.rows[0].val_accuracy, t.rows[1].val_accuracy);
        assert_eq!(t.to_csv().lines().next(), Some("condition,dataset,accuracy"));
    }

    #[test]
    fn short_classes_excluded() {
        let (d, c) = small();
        let sup = toy("s", 3, 3);
        let mut qc = toy("q", 3, 4).classes().to_vec();
        qc[2].images.truncate(1);
        let que = Dataset::from_classes(qc);
        let t = augment_classify(None, &sup, &que, &[("base", Augmentation::None)], "toy", &d, &c).unwrap();
        assert_eq!(t.excluded, vec!["c2".to_string()]);
        assert_eq!(t.classes.len(), 2);
    }
}
