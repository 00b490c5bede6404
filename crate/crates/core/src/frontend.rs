//! Patch-similarity frontend.
//!
//! Every traversed voxel is projected into the reference view and its
//! adjacent views; the features sampled there are compared pairwise and the
//! per-voxel scores are turned into a surface distribution along the ray with
//! a tempered softmax.

use std::collections::BTreeMap;

use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, RayId, RayTraversal, VoxelGrid};
use crate::io::{Image, Tensor};

/// Below this norm a whitened patch or embedded feature is treated as empty.
const ZERO_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontendMode {
    Zncc,
    Sad,
    Linear,
    External,
}

impl std::str::FromStr for FrontendMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zncc" => Ok(FrontendMode::Zncc),
            "sad" => Ok(FrontendMode::Sad),
            "linear" => Ok(FrontendMode::Linear),
            "external" => Ok(FrontendMode::External),
            other => Err(Error::InvalidConfig(format!("unknown frontend mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for FrontendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrontendMode::Zncc => "zncc",
            FrontendMode::Sad => "sad",
            FrontendMode::Linear => "linear",
            FrontendMode::External => "external",
        })
    }
}

/// Which view pairs are averaged into a voxel's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSet {
    /// Every unordered pair among the reference and adjacent views.
    All,
    /// Only pairs that include the reference view.
    Reference,
}

impl std::str::FromStr for PairSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(PairSet::All),
            "reference" | "ref" => Ok(PairSet::Reference),
            other => Err(Error::InvalidConfig(format!("unknown pair set '{other}'"))),
        }
    }
}

impl std::fmt::Display for PairSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairSet::All => "all",
            PairSet::Reference => "reference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub mode: FrontendMode,
    pub patch_size: usize,
    pub num_adjacent: usize,
    pub temperature: f64,
    pub pairs: PairSet,
    /// Output channels of the linear embedding.
    pub channels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            mode: FrontendMode::Zncc,
            patch_size: 11,
            num_adjacent: 4,
            temperature: 1.0,
            pairs: PairSet::All,
            channels: 32,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig("patch_size must be odd and >= 3".into()));
        }
        if self.num_adjacent == 0 {
            return Err(Error::InvalidConfig("num_adjacent must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Per-pixel feature vectors of one view, stored `H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Imports an `(H, W, C)` tensor and L2-normalizes every pixel.
    pub fn from_tensor(view: usize, tensor: &Tensor) -> Result<Self> {
        let [h, w, c] = tensor.dims[..] else {
            return Err(Error::ShapeMismatch(format!(
                "feature tensor must be (H, W, C), got {:?}",
                tensor.dims
            )));
        };
        let mut data: Vec<f64> = tensor.data.iter().map(|&x| x as f64).collect();
        for px in data.chunks_mut(c.max(1)) {
            normalize_in_place(px);
        }
        Ok(FeatureMap {
            view,
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width, self.channels],
            data: self.data.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Bilinear taps at continuous pixel position `(u, v)`; `None` when the
    /// position is outside the image.
    pub fn taps(&self, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
        if !(u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64) {
            return None;
        }
        let x = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        Some([
            (y0 * self.width + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.width + x1, fx * (1.0 - fy)),
            (y1 * self.width + x0, (1.0 - fx) * fy),
            (y1 * self.width + x1, fx * fy),
        ])
    }

    pub fn gather(&self, taps: &[(usize, f64); 4], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for &(p, w) in taps {
            if w != 0.0 {
                for (o, f) in out.iter_mut().zip(self.pixel(p)) {
                    *o += w * f;
                }
            }
        }
    }
}

/// Learnable `C x D` patch embedding, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmbedding {
    pub channels: usize,
    pub input_dim: usize,
    pub weights: Vec<f64>,
}

impl LinearEmbedding {
    pub fn zeros(channels: usize, input_dim: usize) -> Self {
        LinearEmbedding {
            channels,
            input_dim,
            weights: vec![0.0; channels * input_dim],
        }
    }

    /// `channels = input_dim` identity.
    pub fn identity(dim: usize) -> Self {
        let mut e = LinearEmbedding::zeros(dim, dim);
        for i in 0..dim {
            e.weights[i * dim + i] = 1.0;
        }
        e
    }

    /// Gaussian initialization with standard deviation `1 / sqrt(input_dim)`.
    pub fn random(channels: usize, input_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..channels * input_dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        LinearEmbedding {
            channels,
            input_dim,
            weights,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.input_dim..(c + 1) * self.input_dim];
            *o = row.iter().zip(x).map(|(w, x)| w * x).sum();
        }
    }
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < ZERO_NORM {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flattened `size x size` patch around `(row, col)` with edge replication.
pub fn extract_patch(image: &Image, row: usize, col: usize, size: usize) -> Vec<f64> {
    let half = (size / 2) as i64;
    let mut out = Vec::with_capacity(size * size);
    for dr in -half..=half {
        let r = (row as i64 + dr).clamp(0, image.height as i64 - 1) as usize;
        for dc in -half..=half {
            let c = (col as i64 + dc).clamp(0, image.width as i64 - 1) as usize;
            out.push(image.at(r, c) as f64);
        }
    }
    out
}

/// Mean-subtracted, unit-norm patch; zero for constant patches.
pub fn whiten(mut patch: Vec<f64>) -> Vec<f64> {
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    patch.iter_mut().for_each(|x| *x -= mean);
    normalize_in_place(&mut patch);
    patch
}

/// Whitened patch vectors of every pixel, `H x W x patch_dim`.
pub fn whitened_patches(image: &Image, patch_size: usize) -> Vec<f64> {
    (0..image.height * image.width)
        .into_par_iter()
        .flat_map_iter(|p| whiten(extract_patch(image, p / image.width, p % image.width, patch_size)))
        .collect()
}

pub fn compute_features(
    view: usize,
    image: &Image,
    config: &FrontendConfig,
    embedding: Option<&LinearEmbedding>,
) -> Result<FeatureMap> {
    config.validate()?;
    let d = config.patch_dim();
    let (channels, data) = match config.mode {
        FrontendMode::Zncc => (d, whitened_patches(image, config.patch_size)),
        FrontendMode::Sad => {
            let data = (0..image.height * image.width)
                .into_par_iter()
                .flat_map_iter(|p| extract_patch(image, p / image.width, p % image.width, config.patch_size))
                .collect();
            (d, data)
        }
        FrontendMode::Linear => {
            let emb = embedding.ok_or_else(|| Error::InvalidConfig("linear mode needs an embedding".into()))?;
            if emb.input_dim != d {
                return Err(Error::ShapeMismatch(format!(
                    "embedding expects {} inputs, patches have {d}",
                    emb.input_dim
                )));
            }
            let patches = whitened_patches(image, config.patch_size);
            let mut data = vec![0.0; image.width * image.height * emb.channels];
            data.par_chunks_mut(emb.channels)
                .zip(patches.par_chunks(d))
                .for_each(|(out, x)| {
                    emb.apply(x, out);
                    normalize_in_place(out);
                });
            (emb.channels, data)
        }
        FrontendMode::External => {
            return Err(Error::InvalidConfig(
                "external features are loaded with FeatureMap::from_tensor".into(),
            ))
        }
    };
    Ok(FeatureMap {
        view,
        width: image.width,
        height: image.height,
        channels,
        data,
    })
}

/// For each camera, the `n` other cameras with the nearest centers; ties
/// go to the lower view id.
pub fn adjacent_views(cameras: &[Camera], n: usize) -> Vec<Vec<usize>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let c = cam.center();
            // Distances are quantized so that rounding noise cannot override the id tie-break.
            let mut others: Vec<(i64, usize)> = cameras
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, o)| (((o.center() - c).norm() * 1e9).round() as i64, j))
                .collect();
            others.sort();
            others.into_iter().take(n).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Cameras, their feature maps and view adjacency, indexed by view id.
#[derive(Clone, Copy)]
pub struct Views<'a> {
    pub cameras: &'a [Camera],
    pub maps: &'a [FeatureMap],
    pub adjacency: &'a [Vec<usize>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistribution {
    pub ray_id: RayId,
    pub s: Vec<f64>,
}

/// Where one view sees a voxel.
#[derive(Debug, Clone)]
struct ViewSample {
    view: usize,
    /// Position in `[reference, adjacent...]`; 0 is the reference view.
    slot: usize,
    taps: [(usize, f64); 4],
}

/// Forward quantities of one scored voxel needed for the backward pass.
#[derive(Debug, Clone)]
pub struct VoxelCache {
    samples: Vec<ViewSample>,
    /// Interpolated features, renormalized in the normalized modes.
    features: Vec<Vec<f64>>,
    /// Norms before renormalization; zero marks a feature left untouched.
    norms: Vec<f64>,
    pairs: usize,
}

/// Forward cache of [`score_ray_cached`].
#[derive(Debug, Clone)]
pub struct RayScoreCache {
    pub ray_id: RayId,
    voxels: Vec<Option<VoxelCache>>,
    /// Resolved pre-temperature scores, one per voxel.
    pub raw: Vec<f64>,
    /// Invalid voxels copy the score of this voxel.
    alias: Vec<Option<usize>>,
    pub temperature: f64,
    pub s: Vec<f64>,
}

fn pair_count(valid_slots: &[usize], pairs: PairSet) -> usize {
    let m = valid_slots.len();
    match pairs {
        PairSet::All => m * m.saturating_sub(1) / 2,
        PairSet::Reference => {
            if valid_slots.first() == Some(&0) {
                m - 1
            } else {
                0
            }
        }
    }
}

/// Mean pairwise similarity among the given feature vectors.
fn pair_score(features: &[Vec<f64>], slots: &[usize], mode: FrontendMode, pairs: PairSet) -> f64 {
    let n = pair_count(slots, pairs) as f64;
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        match mode {
            FrontendMode::Sad => -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64,
            _ => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    };
    match (pairs, mode) {
        (PairSet::All, FrontendMode::Sad) => {
            let mut acc = 0.0;
            for i in 0..features.len() {
                for j in i + 1..features.len() {
                    acc += sim(&features[i], &features[j]);
                }
            }
            acc / n
        }
        (PairSet::All, _) => {
            // sum_{i<j} <f_i, f_j> = (|sum f|^2 - sum |f|^2) / 2
            let c = features[0].len();
            let mut total = vec![0.0; c];
            let mut sq = 0.0;
            for f in features {
                for (t, x) in total.iter_mut().zip(f) {
                    *t += x;
                }
                sq += f.iter().map(|x| x * x).sum::<f64>();
            }
            let tot_sq: f64 = total.iter().map(|x| x * x).sum();
            (tot_sq - sq) / (2.0 * n)
        }
        (PairSet::Reference, _) => {
            features[1..].iter().map(|f| sim(&features[0], f)).sum::<f64>() / n
        }
    }
}

fn sample_voxel(
    views: &Views,
    ref_view: usize,
    center: &crate::geometry::Vec3,
) -> Vec<ViewSample> {
    std::iter::once(ref_view)
        .chain(views.adjacency[ref_view].iter().copied())
        .enumerate()
        .filter_map(|(slot, view)| {
            let proj = views.cameras[view].project(center).ok()?;
            let taps = views.maps[view].taps(proj.u, proj.v)?;
            Some(ViewSample { view, slot, taps })
        })
        .collect()
}

fn score_voxel(views: &Views, ref_view: usize, voxel: usize, grid: &VoxelGrid, config: &FrontendConfig) -> Option<VoxelCache> {
    let center = grid.voxel_center(voxel).ok()?;
    let samples = sample_voxel(views, ref_view, &center);
    let slots: Vec<usize> = samples.iter().map(|s| s.slot).collect();
    let pairs = pair_count(&slots, config.pairs);
    if pairs == 0 {
        return None;
    }
    let mut norms = Vec::with_capacity(samples.len());
    let features = samples
        .iter()
        .map(|s| {
            let map = &views.maps[s.view];
            let mut f = vec![0.0; map.channels];
            map.gather(&s.taps, &mut f);
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if config.mode != FrontendMode::Sad && n >= ZERO_NORM {
                f.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            } else {
                norms.push(0.0);
            }
            f
        })
        .collect();
    Some(VoxelCache {
        samples,
        features,
        norms,
        pairs,
    })
}

/// Raw score of a voxel seen from `ref_view`, or `None` when fewer than one
/// valid pair of views observes it.
pub fn voxel_score(views: &Views, ref_view: usize, voxel: usize, grid: &VoxelGrid, config: &FrontendConfig) -> Option<f64> {
    let cache = score_voxel(views, ref_view, voxel, grid, config)?;
    let slots: Vec<usize> = cache.samples.iter().map(|s| s.slot).collect();
    Some(pair_score(&cache.features, &slots, config.mode, config.pairs))
}

/// Resolves invalid scores to the ray minimum and applies the tempered
/// softmax. Returns `(s, resolved raw scores, aliases)`.
pub fn softmax_scores(raw: &[Option<f64>], temperature: f64) -> (Vec<f64>, Vec<f64>, Vec<Option<usize>>) {
    let n = raw.len();
    let argmin = raw
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i, r)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let Some((min_idx, min_val)) = argmin else {
        return (vec![1.0 / n as f64; n], vec![0.0; n], vec![None; n]);
    };
    let alias: Vec<Option<usize>> = raw.iter().map(|r| if r.is_some() { None } else { Some(min_idx) }).collect();
    let resolved: Vec<f64> = raw.iter().map(|r| r.unwrap_or(min_val)).collect();
    let s = softmax(&resolved, temperature);
    (s, resolved, alias)
}

pub fn softmax(raw: &[f64], temperature: f64) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn score_ray(ray: &RayTraversal, views: &Views, grid: &VoxelGrid, config: &FrontendConfig) -> SurfaceDistribution {
    let raw: Vec<Option<f64>> = ray
        .voxels
        .iter()
        .map(|&v| voxel_score(views, ray.ray_id.view, v, grid, config))
        .collect();
    let (s, _, _) = softmax_scores(&raw, config.temperature);
    SurfaceDistribution { ray_id: ray.ray_id, s }
}

/// [`score_ray`] that keeps everything the backward pass needs.
pub fn score_ray_cached(
    ray: &RayTraversal,
    views: &Views,
    grid: &VoxelGrid,
    config: &FrontendConfig,
) -> (SurfaceDistribution, RayScoreCache) {
    let voxels: Vec<Option<VoxelCache>> = ray
        .voxels
        .iter()
        .map(|&v| score_voxel(views, ray.ray_id.view, v, grid, config))
        .collect();
    let raw: Vec<Option<f64>> = voxels
        .iter()
        .map(|c| {
            c.as_ref().map(|c| {
                let slots: Vec<usize> = c.samples.iter().map(|s| s.slot).collect();
                pair_score(&c.features, &slots, config.mode, config.pairs)
            })
        })
        .collect();
    let (s, raw, alias) = softmax_scores(&raw, config.temperature);
    let dist = SurfaceDistribution {
        ray_id: ray.ray_id,
        s: s.clone(),
    };
    let cache = RayScoreCache {
        ray_id: ray.ray_id,
        voxels,
        raw,
        alias,
        temperature: config.temperature,
        s,
    };
    (dist, cache)
}

/// Accumulated frontend gradients: per-pixel feature gradients keyed by
/// `(view, pixel index)` plus the temperature gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrontendGrads {
    pub features: BTreeMap<(usize, usize), Vec<f64>>,
    pub temperature: f64,
}

impl FrontendGrads {
    pub fn merge(&mut self, other: FrontendGrads) {
        self.temperature += other.temperature;
        for (k, g) in other.features {
            match self.features.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.features.insert(k, g);
                }
            }
        }
    }
}

/// Gradient of the pre-softmax raw scores given `dL/ds`.
pub fn softmax_backward(s: &[f64], upstream: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = s.iter().zip(upstream).map(|(s, g)| s * g).sum();
    s.iter().zip(upstream).map(|(s, g)| s * (g - dot) / temperature).collect()
}

/// Backpropagates `dL/ds` of one ray into feature-map and temperature
/// gradients. Not available for SAD, whose similarity is not smooth.
pub fn score_ray_backward(cache: &RayScoreCache, upstream: &[f64], config: &FrontendConfig, grads: &mut FrontendGrads) -> Result<()> {
    if upstream.len() != cache.s.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries, ray has {}",
            upstream.len(),
            cache.s.len()
        )));
    }
    if config.mode == FrontendMode::Sad {
        return Err(Error::InvalidConfig("SAD scores are not differentiable".into()));
    }
    if cache.voxels.iter().all(Option::is_none) {
        return Ok(());
    }
    let tau = cache.temperature;
    let d_raw_local = softmax_backward(&cache.s, upstream, tau);
    // d s / d tau = d s / d z * (-raw / tau^2), with z = raw / tau
    grads.temperature += d_raw_local.iter().zip(&cache.raw).map(|(g, r)| -g * r / tau).sum::<f64>();
    let mut d_raw = vec![0.0; d_raw_local.len()];
    for (i, g) in d_raw_local.iter().enumerate() {
        d_raw[cache.alias[i].unwrap_or(i)] += g;
    }
    for (vc, &g) in cache.voxels.iter().zip(&d_raw) {
        let Some(vc) = vc else { continue };
        if g == 0.0 {
            continue;
        }
        let n = vc.pairs as f64;
        let c = vc.features[0].len();
        let feature_grads: Vec<Vec<f64>> = match config.pairs {
            PairSet::All => {
                let mut total = vec![0.0; c];
                for f in &vc.features {
                    total.iter_mut().zip(f).for_each(|(t, x)| *t += x);
                }
                vc.features
                    .iter()
                    .map(|f| total.iter().zip(f).map(|(t, x)| g * (t - x) / n).collect())
                    .collect()
            }
            PairSet::Reference => {
                let mut out = vec![vec![0.0; c]; vc.features.len()];
                for k in 1..vc.features.len() {
                    for ch in 0..c {
                        out[0][ch] += g * vc.features[k][ch] / n;
                        out[k][ch] = g * vc.features[0][ch] / n;
                    }
                }
                out
            }
        };
        for ((sample, mut df), (f, &norm)) in vc.samples.iter().zip(feature_grads).zip(vc.features.iter().zip(&vc.norms)) {
            if norm > 0.0 {
                let proj: f64 = f.iter().zip(&df).map(|(a, b)| a * b).sum();
                df.iter_mut().zip(f).for_each(|(d, x)| *d = (*d - x * proj) / norm);
            }
            for &(p, w) in &sample.taps {
                if w == 0.0 {
                    continue;
                }
                let acc = grads.features.entry((sample.view, p)).or_insert_with(|| vec![0.0; c]);
                acc.iter_mut().zip(&df).for_each(|(a, d)| *a += w * d);
            }
        }
    }
    Ok(())
}

const BACKWARD_CHUNK: usize = 256;

/// Chains per-pixel feature gradients through `f = normalize(W x)` into a
/// gradient for the embedding weights.
pub fn embedding_backward(
    grads: &FrontendGrads,
    images: &[Image],
    config: &FrontendConfig,
    embedding: &LinearEmbedding,
) -> Vec<f64> {
    let entries: Vec<(&(usize, usize), &Vec<f64>)> = grads.features.iter().collect();
    let partials: Vec<Vec<f64>> = entries
        .par_chunks(BACKWARD_CHUNK)
        .map(|chunk| {
            let mut dw = vec![0.0; embedding.weights.len()];
            let mut h = vec![0.0; embedding.channels];
            for &(&(view, p), df) in chunk {
                let image = &images[view];
                let x = whiten(extract_patch(image, p / image.width, p % image.width, config.patch_size));
                embedding.apply(&x, &mut h);
                let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < ZERO_NORM {
                    continue;
                }
                let f: Vec<f64> = h.iter().map(|v| v / norm).collect();
                let proj: f64 = f.iter().zip(df).map(|(a, b)| a * b).sum();
                for c in 0..embedding.channels {
                    let dh = (df[c] - f[c] * proj) / norm;
                    if dh == 0.0 {
                        continue;
                    }
                    let row = &mut dw[c * embedding.input_dim..(c + 1) * embedding.input_dim];
                    row.iter_mut().zip(&x).for_each(|(w, xi)| *w += dh * xi);
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; embedding.weights.len()];
    for part in partials {
        dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cast_ray, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rng.random::<f32>()).collect())
    }

    fn map_from(view: usize, pixels: Vec<Vec<f64>>, width: usize) -> FeatureMap {
        let channels = pixels[0].len();
        FeatureMap {
            view,
            width,
            height: pixels.len() / width,
            channels,
            data: pixels.concat(),
        }
    }

    #[test]
    fn constant_image_gives_zero_features() {
        let cfg = FrontendConfig {
            patch_size: 3,
            ..Default::default()
        };
        let fm = compute_features(0, &Image::filled(5, 4, 0.3), &cfg, None).unwrap();
        assert!(fm.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zncc_self_similarity_is_one() {
        let cfg = FrontendConfig {
            patch_size: 5,
            ..Default::default()
        };
        let fm = compute_features(0, &noise_image(8, 8, 1), &cfg, None).unwrap();
        for p in 0..64 {
            let f = fm.pixel(p);
            let n: f64 = f.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zncc_matches_direct_correlation() {
        let img = noise_image(9, 9, 2);
        let neg = Image::new(9, 9, img.data.iter().map(|x| 1.0 - x).collect());
        let cfg = FrontendConfig {
            patch_size: 3,
            ..Default::default()
        };
        let a = compute_features(0, &img, &cfg, None).unwrap();
        let b = compute_features(1, &neg, &cfg, None).unwrap();
        for p in [0usize, 10, 40, 80] {
            let ip: f64 = a.pixel(p).iter().zip(b.pixel(p)).map(|(x, y)| x * y).sum();
            assert!((ip + 1.0).abs() < 1e-9, "negated patch must score -1");
        }
        // Direct ZNCC between two different pixels.
        let pa = extract_patch(&img, 4, 4, 3);
        let pb = extract_patch(&img, 2, 5, 3);
        let ma = pa.iter().sum::<f64>() / 9.0;
        let mb = pb.iter().sum::<f64>() / 9.0;
        let num: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = pa.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
        let db: f64 = pb.iter().map(|x| (x - mb).powi(2)).sum::<f64>().sqrt();
        let ip: f64 = a.pixel(4 * 9 + 4).iter().zip(a.pixel(2 * 9 + 5)).map(|(x, y)| x * y).sum();
        assert!((ip - num / (da * db)).abs() < 1e-12);
    }

    #[test]
    fn identity_embedding_reproduces_zncc() {
        let img = noise_image(7, 6, 3);
        let cfg = FrontendConfig {
            patch_size: 3,
            mode: FrontendMode::Linear,
            channels: 9,
            ..Default::default()
        };
        let lin = compute_features(0, &img, &cfg, Some(&LinearEmbedding::identity(9))).unwrap();
        let zncc = compute_features(0, &img, &FrontendConfig { mode: FrontendMode::Zncc, ..cfg.clone() }, None).unwrap();
        for (a, b) in lin.data.iter().zip(&zncc.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn external_features_are_normalized() {
        let t = Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let fm = FeatureMap::from_tensor(0, &t).unwrap();
        assert_eq!(fm.data, vec![0.6, 0.8, 0.0, 0.0]);
        assert!(FeatureMap::from_tensor(0, &Tensor::new(vec![4], vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = FrontendConfig {
            patch_size: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(FrontendConfig { num_adjacent: 0, ..Default::default() }.validate().is_err());
        assert!(FrontendConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn hand_set_softmax() {
        let (s, _, _) = softmax_scores(&[Some(1.0), Some(0.0)], 1.0);
        assert!((s[0] - 0.7311).abs() < 5e-5 && (s[1] - 0.2689).abs() < 5e-5);
        let (u, _, _) = softmax_scores(&[Some(0.3); 5], 1.0);
        assert!(u.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let (inv, resolved, alias) = softmax_scores(&[Some(0.5), None, Some(-1.0)], 1.0);
        assert_eq!(resolved, vec![0.5, -1.0, -1.0]);
        assert_eq!(alias, vec![None, Some(2), None]);
        assert!((inv[1] - inv[2]).abs() < 1e-15);
        let (all_bad, _, _) = softmax_scores(&[None, None], 1.0);
        assert_eq!(all_bad, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let raw = [0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = raw.iter().map(|x| x + 5.5).collect();
        for (a, b) in softmax(&raw, 0.7).iter().zip(softmax(&shifted, 0.7)) {
            assert!((a - b).abs() < 1e-14);
        }
        // Constant upstream gradient leaves the raw scores untouched.
        let g = softmax_backward(&softmax(&raw, 0.7), &[2.0; 4], 0.7);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn pair_average_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let slots: Vec<usize> = (0..5).collect();
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..5 {
            for j in 0..5 {
                if i < j {
                    acc += feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum::<f64>();
                    n += 1;
                }
            }
        }
        assert_eq!(n, 10);
        let got = pair_score(&feats, &slots, FrontendMode::Zncc, PairSet::All);
        assert!((got - acc / 10.0).abs() < 1e-12);
        let reference = pair_score(&feats, &slots, FrontendMode::Zncc, PairSet::Reference);
        let want: f64 = (1..5).map(|j| feats[0].iter().zip(&feats[j]).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>() / 4.0;
        assert!((reference - want).abs() < 1e-12);
    }

    #[test]
    fn scaling_features_scales_scores_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scaled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|x| 1.7 * x).collect()).collect();
        let slots = [0, 1, 2, 3];
        let a = pair_score(&feats, &slots, FrontendMode::Zncc, PairSet::All);
        let b = pair_score(&scaled, &slots, FrontendMode::Zncc, PairSet::All);
        assert!((b - 1.7 * 1.7 * a).abs() < 1e-12);
    }

    #[test]
    fn adjacency_is_nearest_centers() {
        let cams: Vec<Camera> = (0..6)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 6.0;
                Camera::look_at(i, Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.5), Vec3::zeros(), Vec3::z(), 10.0, 8, 8).unwrap()
            })
            .collect();
        let adj = adjacent_views(&cams, 2);
        assert_eq!(adj[0], vec![1, 5]);
        assert_eq!(adj[3], vec![2, 4]);
    }

    /// Two cameras facing a 2-voxel grid where every voxel projects inside
    /// both images; feature maps are constant per view.
    fn tiny_setup(features: [Vec<f64>; 2]) -> (Vec<Camera>, Vec<FeatureMap>, VoxelGrid) {
        let grid = VoxelGrid::new([-0.5, -0.5, -1.0], 1.0, [1, 1, 2]).unwrap();
        let cams: Vec<Camera> = [(-0.2, 0), (0.2, 1)]
            .iter()
            .map(|&(x, id)| Camera::look_at(id, Vec3::new(x, 0.0, -5.0), Vec3::new(0.0, 0.0, 0.0), Vec3::y(), 4.0, 5, 5).unwrap())
            .collect();
        let maps = features
            .into_iter()
            .enumerate()
            .map(|(v, f)| map_from(v, vec![f; 25], 5))
            .collect();
        (cams, maps, grid)
    }

    #[test]
    fn identical_features_give_uniform_distribution() {
        let (cams, maps, grid) = tiny_setup([vec![0.6, 0.8], vec![0.6, 0.8]]);
        let adjacency = adjacent_views(&cams, 1);
        let views = Views {
            cameras: &cams,
            maps: &maps,
            adjacency: &adjacency,
        };
        let ray = cast_ray(&cams[0], 2, 2, &grid).unwrap();
        assert_eq!(ray.len(), 2);
        let s = score_ray(&ray, &views, &grid, &FrontendConfig { patch_size: 3, ..Default::default() });
        assert!(s.s.iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    fn random_scene(seed: u64, mode: FrontendMode) -> (Vec<Camera>, Vec<Image>, VoxelGrid, FrontendConfig, LinearEmbedding) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = VoxelGrid::cube(-1.0, 1.0, 4).unwrap();
        let cams: Vec<Camera> = (0..4)
            .map(|i| {
                let a = 0.4 * i as f64 + rng.random_range(-0.05..0.05);
                Camera::look_at(i, Vec3::new(4.0 * a.cos(), 4.0 * a.sin(), 0.7), Vec3::zeros(), Vec3::z(), 6.0, 8, 8).unwrap()
            })
            .collect();
        let images = (0..4).map(|i| noise_image(8, 8, seed * 10 + i)).collect();
        let cfg = FrontendConfig {
            mode,
            patch_size: 3,
            num_adjacent: 3,
            temperature: 0.7,
            pairs: PairSet::All,
            channels: 4,
        };
        let emb = LinearEmbedding::random(4, 9, &mut rng);
        (cams, images, grid, cfg, emb)
    }

    fn ray_loss(
        cams: &[Camera],
        images: &[Image],
        grid: &VoxelGrid,
        cfg: &FrontendConfig,
        emb: &LinearEmbedding,
        weights: &[f64],
    ) -> f64 {
        let maps: Vec<FeatureMap> = images.iter().enumerate().map(|(v, im)| compute_features(v, im, cfg, Some(emb)).unwrap()).collect();
        let adjacency = adjacent_views(cams, cfg.num_adjacent);
        let views = Views {
            cameras: cams,
            maps: &maps,
            adjacency: &adjacency,
        };
        let mut total = 0.0;
        for (r, (row, col)) in [(3usize, 4usize), (4, 3), (2, 5)].iter().enumerate() {
            let ray = cast_ray(&cams[r % 2], *row, *col, grid).unwrap();
            let s = score_ray(&ray, &views, grid, cfg);
            total += s.s.iter().enumerate().map(|(i, p)| p * weights[(i + r) % weights.len()]).sum::<f64>();
        }
        total
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (cams, images, grid, cfg, emb) = random_scene(1, FrontendMode::Linear);
        let maps: Vec<FeatureMap> = images.iter().enumerate().map(|(v, im)| compute_features(v, im, &cfg, Some(&emb)).unwrap()).collect();
        let adjacency = adjacent_views(&cams, cfg.num_adjacent);
        let views = Views { cameras: &cams, maps: &maps, adjacency: &adjacency };
        let ray = cast_ray(&cams[0], 3, 4, &grid).unwrap();
        let (_, cache) = score_ray_cached(&ray, &views, &grid, &cfg);
        let mut grads = FrontendGrads::default();
        score_ray_backward(&cache, &vec![0.0; ray.len()], &cfg, &mut grads).unwrap();
        assert_eq!(grads.temperature, 0.0);
        assert!(embedding_backward(&grads, &images, &cfg, &emb).iter().all(|&g| g == 0.0));
        assert!(score_ray_backward(&cache, &[1.0], &cfg, &mut grads).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (cams, images, grid, cfg, emb) = random_scene(seed, FrontendMode::Linear);
            let weights = [0.3, -1.0, 2.0, 0.5, -0.7];
            let maps: Vec<FeatureMap> = images.iter().enumerate().map(|(v, im)| compute_features(v, im, &cfg, Some(&emb)).unwrap()).collect();
            let adjacency = adjacent_views(&cams, cfg.num_adjacent);
            let views = Views { cameras: &cams, maps: &maps, adjacency: &adjacency };
            let mut grads = FrontendGrads::default();
            for (r, (row, col)) in [(3usize, 4usize), (4, 3), (2, 5)].iter().enumerate() {
                let ray = cast_ray(&cams[r % 2], *row, *col, &grid).unwrap();
                let (_, cache) = score_ray_cached(&ray, &views, &grid, &cfg);
                let up: Vec<f64> = (0..ray.len()).map(|i| weights[(i + r) % weights.len()]).collect();
                score_ray_backward(&cache, &up, &cfg, &mut grads).unwrap();
            }
            let dw = embedding_backward(&grads, &images, &cfg, &emb);
            let h = 1e-4;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            for k in (0..emb.weights.len()).step_by(3) {
                let mut plus = emb.clone();
                plus.weights[k] += h;
                let mut minus = emb.clone();
                minus.weights[k] -= h;
                let num = (ray_loss(&cams, &images, &grid, &cfg, &plus, &weights) - ray_loss(&cams, &images, &grid, &cfg, &minus, &weights)) / (2.0 * h);
                assert!(rel(dw[k], num) < 1e-4, "W[{k}]: analytic {} numeric {num}", dw[k]);
            }
            let tp = FrontendConfig { temperature: cfg.temperature + h, ..cfg.clone() };
            let tm = FrontendConfig { temperature: cfg.temperature - h, ..cfg.clone() };
            let num = (ray_loss(&cams, &images, &grid, &tp, &emb, &weights) - ray_loss(&cams, &images, &grid, &tm, &emb, &weights)) / (2.0 * h);
            assert!(rel(grads.temperature, num) < 1e-4, "tau: analytic {} numeric {num}", grads.temperature);
        }
    }
}
