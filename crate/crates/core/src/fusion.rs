//! Local representation fusion over the K encoded features of one episode.
//!
//! A [`FusionPlan`] picks a base member and a coefficient vector on the
//! simplex. Fusing replaces selected base locations by
//! `base + sum_r alpha_r * (match_r - base)`, where `match_r` is the most
//! cosine-similar location of reference `r`. Because the alphas sum to one
//! this is the alpha-weighted convex combination of the base vector and its
//! matches, written so a one-hot plan or identical members return the base
//! bit-exactly.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// One replaced base location and, per reference member, the matched
/// locations (top-n by similarity) whose mean is fused in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedLocation {
    pub position: usize,
    pub matches: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub base_index: usize,
    pub alpha: Vec<f64>,
    /// Fraction of base locations that get fused, in (0, 1].
    pub fraction: f64,
    pub top_n: usize,
    pub position_seed: u64,
    /// Filled in by [`fuse_local`]; `None` until the plan has been applied.
    pub replaced: Option<Vec<FusedLocation>>,
    /// Spatial size (h, w) of the features the plan was applied to.
    pub feature_size: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSettings {
    pub fraction: f64,
    pub top_n: usize,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            top_n: 1,
        }
    }
}

impl FusionPlan {
    pub fn shots(&self) -> usize {
        self.alpha.len()
    }

    /// Member indices other than the base, in ascending order.
    pub fn reference_indices(&self) -> Vec<usize> {
        (0..self.shots()).filter(|k| *k != self.base_index).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.shots();
        if k < 2 {
            return Err(Error::Episode(format!("fusion needs K >= 2 members, got {k}")));
        }
        if self.base_index >= k {
            return Err(Error::Contract(format!(
                "base index {} out of range for K = {k}",
                self.base_index
            )));
        }
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Contract(format!(
                "alpha must be a nonnegative vector summing to 1, got {:?}",
                self.alpha
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fusion fraction {} not in (0, 1]", self.fraction)));
        }
        if self.top_n == 0 {
            return Err(Error::Config("fusion top_n must be >= 1".into()));
        }
        Ok(())
    }

    /// Plan with every location fused against the same location of each
    /// reference: a plain alpha-blend of the members.
    pub fn global(mut self, h: usize, w: usize) -> Self {
        let refs = self.shots() - 1;
        self.replaced = Some(
            (0..h * w)
                .map(|p| FusedLocation {
                    position: p,
                    matches: vec![vec![p]; refs],
                })
                .collect(),
        );
        self.feature_size = Some((h, w));
        self
    }
}

pub fn make_fusion_plan(k: usize, seed: u64) -> Result<FusionPlan> {
    make_fusion_plan_with(k, seed, FusionSettings::default())
}

pub fn make_fusion_plan_with(k: usize, seed: u64, settings: FusionSettings) -> Result<FusionPlan> {
    if k < 2 {
        return Err(Error::Episode(format!("fusion needs K >= 2 members, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_index = rng.random_range(0..k);
    // Normalized unit exponentials are uniform on the simplex.
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let alpha = draws.iter().map(|d| d / total).collect();
    let plan = FusionPlan {
        base_index,
        alpha,
        fraction: settings.fraction,
        top_n: settings.top_n,
        position_seed: rng.random(),
        replaced: None,
        feature_size: None,
    };
    plan.validate()?;
    Ok(plan)
}

/// Cosine similarities between every base location and every location of
/// each reference: `values[r][p][q]`.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    pub values: Vec<Vec<Vec<f64>>>,
}

impl SimilarityMap {
    /// Top-n locations of reference `r` for base location `p`, ties broken
    /// by lower index.
    pub fn top_matches(&self, r: usize, p: usize, n: usize) -> Vec<usize> {
        let row = &self.values[r][p];
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
        order.truncate(n.min(row.len()));
        order
    }
}

fn channel_vectors(t: &Tensor) -> Result<(usize, Vec<Vec<f64>>)> {
    let (c, h, w) = t.dims3()?;
    let flat = t.to_dtype(DType::F64)?.reshape((c, h * w))?.t()?.to_vec2::<f64>()?;
    Ok((c, flat))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `base` is `(C, h, w)`, `refs` is `(R, C, h', w')`.
pub fn similarity_map(base: &Tensor, refs: &Tensor) -> Result<SimilarityMap> {
    let (c, base_vecs) = channel_vectors(base)?;
    let (r, rc, _, _) = refs.dims4()?;
    if rc != c {
        return Err(shape_err!("reference channels {rc} != base channels {c}"));
    }
    let mut values = Vec::with_capacity(r);
    for i in 0..r {
        let (_, ref_vecs) = channel_vectors(&refs.get(i)?)?;
        values.push(
            base_vecs
                .iter()
                .map(|bv| ref_vecs.iter().map(|rv| cosine(bv, rv)).collect())
                .collect(),
        );
    }
    Ok(SimilarityMap { values })
}

fn check_members(features: &Tensor, plan: &FusionPlan) -> Result<(usize, usize, usize, usize)> {
    plan.validate()?;
    let (k, c, h, w) = features
        .dims4()
        .map_err(|_| shape_err!("episode features must be (K, C, h, w), got {:?}", features.dims()))?;
    if k != plan.shots() {
        return Err(shape_err!("plan is for K = {}, features have K = {k}", plan.shots()));
    }
    Ok((k, c, h, w))
}

/// Selects fused positions and matches, recording them in `plan`.
pub fn plan_locations(features: &Tensor, plan: &mut FusionPlan) -> Result<()> {
    let (_, _, h, w) = check_members(features, plan)?;
    let hw = h * w;
    let count = ((plan.fraction * hw as f64).round() as usize).clamp(1, hw);
    let mut positions: Vec<usize> = (0..hw).collect();
    if count < hw {
        positions.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.position_seed));
        positions.truncate(count);
        positions.sort_unstable();
    }
    let refs = plan.reference_indices();
    let ref_ids = Tensor::new(refs.iter().map(|r| *r as u32).collect::<Vec<_>>(), features.device())?;
    let detached = features.detach();
    let sim = similarity_map(&detached.get(plan.base_index)?, &detached.index_select(&ref_ids, 0)?)?;
    let replaced = positions
        .into_iter()
        .map(|p| FusedLocation {
            position: p,
            matches: (0..refs.len()).map(|r| sim.top_matches(r, p, plan.top_n)).collect(),
        })
        .collect();
    plan.replaced = Some(replaced);
    plan.feature_size = Some((h, w));
    Ok(())
}

/// Per reference: gather indices (one list per top-n rank) and the weight
/// of that reference at each output location.
struct GatherSpec {
    indices: Vec<Vec<Vec<u32>>>,
    weights: Vec<Vec<f64>>,
}

fn gather_spec(
    plan: &FusionPlan,
    out_len: usize,
    location_of: impl Fn(usize) -> Option<(usize, usize)>,
    source_of: impl Fn(usize, usize) -> usize,
) -> Result<GatherSpec> {
    let replaced = plan
        .replaced
        .as_ref()
        .ok_or_else(|| Error::Contract("fusion plan has no replaced positions".into()))?;
    let refs = plan.reference_indices();
    let top_n = replaced
        .first()
        .map(|l| l.matches.first().map_or(1, |m| m.len()))
        .unwrap_or(1)
        .max(1);
    let mut by_position = vec![None; out_len.max(1)];
    let (h, w) = plan
        .feature_size
        .ok_or_else(|| Error::Contract("fusion plan has no feature size".into()))?;
    let mut lookup = vec![None; h * w];
    for (i, loc) in replaced.iter().enumerate() {
        if loc.position >= h * w || loc.matches.len() != refs.len() {
            return Err(Error::Contract(format!("malformed fused location {loc:?}")));
        }
        lookup[loc.position] = Some(i);
    }
    for (o, slot) in by_position.iter_mut().enumerate().take(out_len) {
        if let Some((pos, offset)) = location_of(o) {
            if let Some(i) = lookup[pos] {
                *slot = Some((i, offset));
            }
        }
    }
    let mut indices = vec![vec![vec![0u32; out_len]; top_n]; refs.len()];
    let mut weights = vec![vec![0.0; out_len]; refs.len()];
    for (r, &member) in refs.iter().enumerate() {
        for o in 0..out_len {
            match by_position[o] {
                Some((i, offset)) => {
                    let matches = &replaced[i].matches[r];
                    for j in 0..top_n {
                        let q = matches[j.min(matches.len() - 1)];
                        indices[r][j][o] = source_of(q, offset) as u32;
                    }
                    weights[r][o] = plan.alpha[member];
                }
                None => {
                    for j in 0..top_n {
                        indices[r][j][o] = o as u32;
                    }
                }
            }
        }
    }
    Ok(GatherSpec { indices, weights })
}

/// `members` is `(K, C, L)` flattened over space.
fn apply_gather(members: &Tensor, plan: &FusionPlan, spec: &GatherSpec) -> Result<Tensor> {
    let (_, c, len) = members.dims3()?;
    let base = members.get(plan.base_index)?;
    let mut out = base.clone();
    for (r, &member) in plan.reference_indices().iter().enumerate() {
        let reference = members.get(member)?;
        let n = spec.indices[r].len();
        let mut gathered: Option<Tensor> = None;
        for idx in &spec.indices[r] {
            let ids = Tensor::new(idx.as_slice(), members.device())?;
            let g = reference.index_select(&ids, 1)?;
            gathered = Some(match gathered {
                None => g,
                Some(acc) => (acc + g)?,
            });
        }
        let mut gathered = gathered.expect("at least one match rank");
        if n > 1 {
            gathered = (gathered / n as f64)?;
        }
        let weight = Tensor::new(spec.weights[r].as_slice(), members.device())?
            .to_dtype(members.dtype())?
            .reshape((1, len))?;
        out = (out + (gathered - &base)?.broadcast_mul(&weight)?)?;
    }
    debug_assert_eq!(out.dims(), &[c, len]);
    Ok(out)
}

/// Fuse the K members of `features` (shape `(K, C, h, w)`) into one map
/// `(C, h, w)`. Plans that have not been applied yet get their locations
/// chosen here and recorded.
pub fn fuse_local(features: &Tensor, plan: &mut FusionPlan) -> Result<Tensor> {
    let (k, c, h, w) = check_members(features, plan)?;
    if plan.replaced.is_none() || plan.feature_size != Some((h, w)) {
        plan_locations(features, plan)?;
    }
    let spec = gather_spec(plan, h * w, |o| Some((o, 0)), |q, _| q)?;
    let fused = apply_gather(&features.reshape((k, c, h * w))?, plan, &spec)?;
    Ok(fused.reshape((c, h, w))?)
}

/// The image-level fusion target: the plan's feature-level replacements
/// mapped to pixels by nearest-neighbour upscaling. `images` is `(K, C, H, W)`.
pub fn fuse_images(images: &Tensor, plan: &FusionPlan) -> Result<Tensor> {
    let (k, c, big_h, big_w) = check_members(images, plan)?;
    let (h, w) = plan
        .feature_size
        .ok_or_else(|| Error::Contract("fusion plan lacks replaced positions".into()))?;
    if plan.replaced.is_none() {
        return Err(Error::Contract("fusion plan lacks replaced positions".into()));
    }
    if big_h % h != 0 || big_w % w != 0 {
        return Err(shape_err!("image {big_h}x{big_w} is not a multiple of feature {h}x{w}"));
    }
    let (sy, sx) = (big_h / h, big_w / w);
    let spec = gather_spec(
        plan,
        big_h * big_w,
        |o| {
            let (y, x) = (o / big_w, o % big_w);
            Some(((y / sy) * w + x / sx, (y % sy) * sx + x % sx))
        },
        |q, offset| {
            let (qy, qx) = (q / w, q % w);
            (qy * sy + offset / sx) * big_w + qx * sx + offset % sx
        },
    )?;
    let fused = apply_gather(&images.reshape((k, c, big_h * big_w))?, plan, &spec)?;
    Ok(fused.reshape((c, big_h, big_w))?)
}
