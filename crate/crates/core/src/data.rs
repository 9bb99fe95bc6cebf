//! Dataset layout, seen/unseen split manifests and image ingestion.
//!
//! A dataset root holds one subdirectory per class. Images are decoded to
//! RGB, center-cropped to a square, resized, and mapped to `[-1, 1]`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// `None` means proportional to the 85/17 seen/unseen split.
    pub seen_count: Option<usize>,
    pub unseen_count: Option<usize>,
    pub sup_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            manifest: None,
            seen_count: None,
            unseen_count: None,
            sup_fraction: 0.25,
            split_seed: 0,
        }
    }
}

/// Seen/unseen class counts scaled from the 85/17 split of 102 classes.
pub fn proportional_split(total: usize) -> (usize, usize) {
    let seen = ((total as f64) * 85.0 / 102.0).round() as usize;
    let seen = seen.clamp(1, total.saturating_sub(1).max(1));
    (seen, total - seen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "split", rename_all = "lowercase")]
pub enum Assignment {
    Seen { images: Vec<String> },
    Unseen { support: Vec<String>, query: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub name: String,
    #[serde(flatten)]
    pub assignment: Assignment,
}

impl ClassSplit {
    pub fn is_seen(&self) -> bool {
        matches!(self.assignment, Assignment::Seen { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub classes: Vec<ClassSplit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Seen,
    UnseenSupport,
    UnseenQuery,
    UnseenAll,
}

impl SplitManifest {
    pub fn seen(&self) -> impl Iterator<Item = &ClassSplit> {
        self.classes.iter().filter(|c| c.is_seen())
    }

    pub fn unseen(&self) -> impl Iterator<Item = &ClassSplit> {
        self.classes.iter().filter(|c| !c.is_seen())
    }

    pub fn seen_names(&self) -> Vec<String> {
        self.seen().map(|c| c.name.clone()).collect()
    }

    pub fn unseen_names(&self) -> Vec<String> {
        self.unseen().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", self.version)));
        }
        let mut names = BTreeSet::new();
        for class in &self.classes {
            if !names.insert(&class.name) {
                return Err(Error::Data(format!("class {} listed twice", class.name)));
            }
            if let Assignment::Unseen { support, query } = &class.assignment {
                let sup: BTreeSet<_> = support.iter().collect();
                if query.iter().any(|q| sup.contains(q)) {
                    return Err(Error::Data(format!("class {}: support and query overlap", class.name)));
                }
            }
        }
        Ok(())
    }

    /// Image files of `class` that belong to `part`.
    pub fn images(&self, class: &ClassSplit, part: Partition) -> Vec<String> {
        match (&class.assignment, part) {
            (Assignment::Seen { images }, Partition::Seen) => images.clone(),
            (Assignment::Unseen { support, .. }, Partition::UnseenSupport) => support.clone(),
            (Assignment::Unseen { query, .. }, Partition::UnseenQuery) => query.clone(),
            (Assignment::Unseen { support, query }, Partition::UnseenAll) => {
                support.iter().chain(query).cloned().collect()
            }
            _ => Vec::new(),
        }
    }

    /// Drop an image that failed to decode.
    pub fn invalidate(&mut self, class: &str, image: &str) {
        for c in self.classes.iter_mut().filter(|c| c.name == class) {
            match &mut c.assignment {
                Assignment::Seen { images } => images.retain(|i| i != image),
                Assignment::Unseen { support, query } => {
                    support.retain(|i| i != image);
                    query.retain(|i| i != image);
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s.into_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: SplitManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Sorted `(class, images)` listing of a dataset root.
pub fn scan_dataset(root: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut classes = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let dir = entry.path();
        let mut images = Vec::new();
        for file in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = file.map_err(|e| Error::io(&dir, e))?.path();
            let ok = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if ok {
                images.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        images.sort();
        classes.push((entry.file_name().to_string_lossy().into_owned(), images));
    }
    classes.sort();
    Ok(classes)
}

pub fn build_manifest_from_listing(
    listing: &[(String, Vec<String>)],
    seen_count: usize,
    unseen_count: usize,
    sup_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if seen_count == 0 || unseen_count == 0 {
        return Err(Error::Data("need at least one seen and one unseen class".into()));
    }
    if seen_count + unseen_count > listing.len() {
        return Err(Error::Data(format!(
            "requested {seen_count} seen + {unseen_count} unseen classes but only {} exist",
            listing.len()
        )));
    }
    if !(sup_fraction > 0.0 && sup_fraction < 1.0) {
        return Err(Error::Data(format!("sup_fraction {sup_fraction} must be in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..listing.len()).collect();
    order.shuffle(&mut rng);
    let mut seen: Vec<usize> = order[..seen_count].to_vec();
    let mut unseen: Vec<usize> = order[seen_count..seen_count + unseen_count].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();

    let mut classes = Vec::with_capacity(seen_count + unseen_count);
    for &i in &seen {
        let (name, images) = &listing[i];
        if images.is_empty() {
            return Err(Error::Data(format!("seen class {name} has no images")));
        }
        classes.push(ClassSplit {
            name: name.clone(),
            assignment: Assignment::Seen { images: images.clone() },
        });
    }
    for &i in &unseen {
        let (name, images) = &listing[i];
        if images.len() < 2 {
            return Err(Error::Data(format!(
                "unseen class {name} needs at least 2 images for a support/query split"
            )));
        }
        let mut shuffled = images.clone();
        shuffled.shuffle(&mut rng);
        let n_sup = ((images.len() as f64 * sup_fraction).round() as usize).clamp(1, images.len() - 1);
        let mut support = shuffled[..n_sup].to_vec();
        let mut query = shuffled[n_sup..].to_vec();
        support.sort();
        query.sort();
        classes.push(ClassSplit {
            name: name.clone(),
            assignment: Assignment::Unseen { support, query },
        });
    }
    classes.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(SplitManifest {
        version: MANIFEST_VERSION,
        seed,
        classes,
    })
}

pub fn build_manifest(
    root: &Path,
    seen_count: usize,
    unseen_count: usize,
    sup_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    build_manifest_from_listing(&scan_dataset(root)?, seen_count, unseen_count, sup_fraction, seed)
}

/// Decode, center-crop to square, resize and scale to `[-1, 1]`; returns `(3, S, S)`.
pub fn load_image(path: &Path, image_size: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let s = image_size as u32;
    let resized = if side == s {
        cropped
    } else {
        image::imageops::resize(&cropped, s, s, FilterType::Triangle)
    };
    rgb_to_tensor(&resized)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// `(3, H, W)` in `[-1, 1]` to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let q = |x: f32| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(v[i]), q(v[h * w + i]), q(v[2 * h * w + i])])
    }))
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    tensor_to_rgb(t)?.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadKind {
    Decode,
    Access,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadEvent {
    pub class: String,
    pub image: String,
    pub kind: ReadKind,
}

/// Shared record of every image decode and in-memory access.
#[derive(Debug, Clone, Default)]
pub struct ReadLog(Arc<Mutex<Vec<ReadEvent>>>);

impl ReadLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, class: &str, image: &str, kind: ReadKind) {
        self.0.lock().unwrap().push(ReadEvent {
            class: class.to_string(),
            image: image.to_string(),
            kind,
        });
    }

    pub fn events(&self) -> Vec<ReadEvent> {
        self.0.lock().unwrap().clone()
    }

    pub fn classes_touched(&self) -> BTreeSet<String> {
        self.events().into_iter().map(|e| e.class).collect()
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

#[derive(Debug, Clone)]
pub struct LoadedClass {
    pub name: String,
    pub label: usize,
    pub images: Vec<(String, Tensor)>,
}

/// In-memory images of one manifest partition.
#[derive(Debug)]
pub struct Dataset {
    classes: Vec<LoadedClass>,
    log: Option<ReadLog>,
    warned_small: AtomicBool,
}

impl Dataset {
    pub fn from_classes(classes: Vec<LoadedClass>) -> Self {
        Self {
            classes,
            log: None,
            warned_small: AtomicBool::new(false),
        }
    }

    pub fn with_log(mut self, log: ReadLog) -> Self {
        self.log = Some(log);
        self
    }

    /// Loads the images of `part`. Labels follow manifest order within the
    /// partition. Undecodable files are skipped, logged, and returned.
    pub fn load(
        root: &Path,
        manifest: &SplitManifest,
        part: Partition,
        image_size: usize,
        log: Option<ReadLog>,
    ) -> Result<(Self, Vec<(String, String)>)> {
        let wanted: Vec<&ClassSplit> = match part {
            Partition::Seen => manifest.seen().collect(),
            _ => manifest.unseen().collect(),
        };
        let mut classes = Vec::with_capacity(wanted.len());
        let mut skipped = Vec::new();
        for (label, class) in wanted.into_iter().enumerate() {
            let mut images = Vec::new();
            for file in manifest.images(class, part) {
                let path = root.join(&class.name).join(&file);
                if let Some(log) = &log {
                    log.record(&class.name, &file, ReadKind::Decode);
                }
                match load_image(&path, image_size) {
                    Ok(t) => images.push((file, t)),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        skipped.push((class.name.clone(), file));
                    }
                }
            }
            classes.push(LoadedClass {
                name: class.name.clone(),
                label,
                images,
            });
        }
        let mut ds = Self::from_classes(classes);
        ds.log = log;
        Ok((ds, skipped))
    }

    pub fn classes(&self) -> &[LoadedClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, class: usize, index: usize) -> &Tensor {
        let c = &self.classes[class];
        let (name, t) = &c.images[index];
        if let Some(log) = &self.log {
            log.record(&c.name, name, ReadKind::Access);
        }
        t
    }

    pub(crate) fn warn_small_classes_once(&self, k: usize) {
        let small: Vec<&str> = self
            .classes
            .iter()
            .filter(|c| c.images.len() < k)
            .map(|c| c.name.as_str())
            .collect();
        if !small.is_empty() && !self.warned_small.swap(true, Ordering::Relaxed) {
            log::warn!("classes with fewer than {k} images are excluded from sampling: {small:?}");
        }
    }
}

/// Writes a procedurally generated class-folder dataset: each class has its
/// own two-colour stripe/checker texture and accent blob, randomized per image.
pub fn write_synthetic_dataset(root: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..classes {
        let dir = root.join(format!("class_{c:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let color = |rng: &mut ChaCha8Rng| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (a, b, accent) = (color(&mut rng), color(&mut rng), color(&mut rng));
        let pattern = c % 4;
        let period = 2 + (c / 4) % 3;
        for i in 0..per_class {
            let phase = rng.random_range(0..period * 2);
            let cx = rng.random_range(0.25..0.75) * size as f32;
            let cy = rng.random_range(0.25..0.75) * size as f32;
            let radius = rng.random_range(0.12..0.25) * size as f32;
            let gain = rng.random_range(0.8..1.0f32);
            let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
                let (x, y) = (x as usize + phase, y as usize);
                let on = match pattern {
                    0 => (y / period) % 2 == 0,
                    1 => (x / period) % 2 == 0,
                    2 => ((x + y) / period) % 2 == 0,
                    _ => ((x / period) + (y / period)) % 2 == 0,
                };
                let base = if on { a } else { b };
                let (dx, dy) = (x as f32 - phase as f32 - cx, y as f32 - cy);
                let px = if dx * dx + dy * dy < radius * radius { accent } else { base };
                Rgb(px.map(|v| ((v * gain).clamp(0.0, 1.0) * 255.0).round() as u8))
            });
            let path = dir.join(format!("img_{i:03}.png"));
            img.save(&path)?;
        }
    }
    Ok(())
}
