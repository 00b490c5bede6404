//! Depth maps, point clouds and reconstruction metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};
use crate::io::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthReduction {
    Expectation,
    Argmax,
}

impl std::str::FromStr for DepthReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "expectation" => Ok(DepthReduction::Expectation),
            "argmax" => Ok(DepthReduction::Argmax),
            other => Err(Error::InvalidConfig(format!("unknown depth reduction '{other}'"))),
        }
    }
}

/// Collapses a depth distribution to one depth. Argmax ties go to the
/// nearer depth.
pub fn posterior_to_depth(p: &[f64], depths: &[f64], mode: DepthReduction) -> f64 {
    match mode {
        DepthReduction::Expectation => p.iter().zip(depths).map(|(p, d)| p * d).sum(),
        DepthReduction::Argmax => {
            let mut best = 0;
            for i in 1..p.len() {
                if p[i] > p[best] || (p[i] == p[best] && depths[i] < depths[best]) {
                    best = i;
                }
            }
            depths[best]
        }
    }
}

/// Per-pixel depth along the viewing ray, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(view: usize, width: usize, height: usize) -> Self {
        DepthMap {
            view,
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn set(&mut self, row: usize, col: usize, depth: f64) {
        let i = row * self.width + col;
        self.depth[i] = depth;
        self.valid[i] = true;
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Invalid pixels are stored as zero.
    pub fn to_image(&self) -> Image {
        let data = self
            .depth
            .iter()
            .zip(&self.valid)
            .map(|(&d, &v)| if v { d as f32 } else { 0.0 })
            .collect();
        Image::new(self.width, self.height, data)
    }

    /// Zero and non-finite pixels become invalid.
    pub fn from_image(view: usize, image: &Image) -> Self {
        let valid: Vec<bool> = image.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depth = image
            .data
            .iter()
            .zip(&valid)
            .map(|(&d, &v)| if v { d as f64 } else { 0.0 })
            .collect();
        DepthMap {
            view,
            width: image.width,
            height: image.height,
            depth,
            valid,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// `(view, row, col)` each point was lifted from, when known.
    pub sources: Vec<(usize, usize, usize)>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: PointCloud) {
        self.points.extend(other.points);
        self.sources.extend(other.sources);
    }
}

/// Lifts every valid pixel to the world point at its depth along the ray.
pub fn depth_to_cloud(map: &DepthMap, camera: &Camera) -> PointCloud {
    let mut cloud = PointCloud::default();
    for row in 0..map.height {
        for col in 0..map.width {
            if let Some(d) = map.get(row, col) {
                let p = camera.center() + camera.pixel_direction(row, col) * d;
                cloud.points.push(p);
                cloud.sources.push((map.view, row, col));
            }
        }
    }
    cloud
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Static 3-d tree for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<KdNode>,
}

#[derive(Debug, Clone)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.build(&mut idx);
        tree
    }

    fn build(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let node = self.nodes.len();
        self.nodes.push(KdNode {
            point: idx[mid],
            axis,
            left: None,
            right: None,
        });
        let (left, rest) = idx.split_at_mut(mid);
        let l = self.build(left);
        let r = self.build(&mut rest[1..]);
        self.nodes[node].left = l;
        self.nodes[node].right = r;
        Some(node)
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let p = &self.points[node.point];
            let d = dist2(p, q);
            if d < best.1 || (d == best.1 && node.point < best.0) {
                best = (node.point, d);
            }
            let diff = q[node.axis] - p[node.axis];
            let (near, far) = if diff < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
            if let Some(f) = far {
                if diff * diff <= best.1 {
                    stack.push(f);
                }
            }
            if let Some(c) = near {
                stack.push(c);
            }
        }
        Some(best)
    }
}

/// Nearest-neighbor distances pred→gt (accuracy) and gt→pred (completeness).
pub fn accuracy_completeness(pred: &PointCloud, gt: &PointCloud) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let nn = |from: &PointCloud, to: &PointCloud| -> Vec<f64> {
        let tree = KdTree::new(&to.points);
        from.points
            .par_iter()
            .map(|p| tree.nearest(p).map_or(f64::INFINITY, |(_, d)| d.sqrt()))
            .collect()
    };
    Ok((nn(pred, gt), nn(gt, pred)))
}

pub fn chamfer(accuracy_mean: f64, completeness_mean: f64) -> f64 {
    (accuracy_mean + completeness_mean) / 2.0
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; the lower of the two middle values for even counts.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(k, f64::total_cmp).1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct MetricsConfig {
    /// Average per-image depth errors instead of pooling all pixels.
    pub per_image: bool,
    /// Drop nearest-neighbor distances above this value.
    pub outlier_threshold: Option<f64>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy_mean: f64,
    pub accuracy_median: f64,
    pub completeness_mean: f64,
    pub completeness_median: f64,
    pub chamfer: f64,
    pub depth_error_mean: f64,
    pub depth_error_median: f64,
    pub valid_pixels: usize,
}

/// Per-pixel absolute depth errors over pixels valid in both maps.
pub fn depth_errors(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<f64>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "view {}: prediction is {}x{}, ground truth {}x{}",
            pred.view, pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(pred
        .depth
        .iter()
        .zip(&pred.valid)
        .zip(gt.depth.iter().zip(&gt.valid))
        .filter(|((_, &pv), (_, &gv))| pv && gv)
        .map(|((p, _), (g, _))| (p - g).abs())
        .collect())
}

pub fn metrics(pred: &[DepthMap], gt: &[DepthMap], cameras: &[Camera], config: &MetricsConfig) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} ground-truth maps, {} cameras",
            pred.len(),
            gt.len(),
            cameras.len()
        )));
    }
    let per_view: Vec<Vec<f64>> = pred.iter().zip(gt).map(|(p, g)| depth_errors(p, g)).collect::<Result<_>>()?;
    let valid_pixels: usize = per_view.iter().map(Vec::len).sum();
    if valid_pixels == 0 {
        return Err(Error::NoValidPixels);
    }
    let (depth_error_mean, depth_error_median) = if config.per_image {
        let views: Vec<&Vec<f64>> = per_view.iter().filter(|v| !v.is_empty()).collect();
        let n = views.len() as f64;
        (
            views.iter().map(|v| mean(v)).sum::<f64>() / n,
            views.iter().map(|v| lower_median(v)).sum::<f64>() / n,
        )
    } else {
        let all: Vec<f64> = per_view.concat();
        (mean(&all), lower_median(&all))
    };
    let mut pred_cloud = PointCloud::default();
    let mut gt_cloud = PointCloud::default();
    for ((p, g), cam) in pred.iter().zip(gt).zip(cameras) {
        pred_cloud.extend(depth_to_cloud(p, cam));
        gt_cloud.extend(depth_to_cloud(g, cam));
    }
    let (mut acc, mut comp) = accuracy_completeness(&pred_cloud, &gt_cloud)?;
    if let Some(t) = config.outlier_threshold {
        acc.retain(|&d| d <= t);
        comp.retain(|&d| d <= t);
    }
    let accuracy_mean = mean(&acc);
    let completeness_mean = mean(&comp);
    Ok(MetricsReport {
        accuracy_mean,
        accuracy_median: lower_median(&acc),
        completeness_mean,
        completeness_median: lower_median(&comp),
        chamfer: chamfer(accuracy_mean, completeness_mean),
        depth_error_mean,
        depth_error_median,
        valid_pixels,
    })
}
