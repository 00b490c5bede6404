//! Forward reconstruction: features, surface distributions, BP, depth maps.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{depth_to_cloud, posterior_to_depth, DepthMap, DepthReduction, PointCloud};
use crate::frontend::{adjacent_views, compute_features, softmax_scores, voxel_score, FeatureMap, FrontendConfig, FrontendMode, LinearEmbedding, Views};
use crate::geometry::{cast_all, RayTraversal, VoxelGrid};
use crate::io::{self, Tensor};
use crate::mrf::{depth_posterior_from, depth_posterior_from_beliefs, run_bp, BpConfig, PosteriorMode, RayFactor};

/// Feature maps for every view; views not flagged in `needed` get an empty
/// map that never yields samples.
pub fn build_feature_maps(
    data: &Dataset,
    config: &FrontendConfig,
    embedding: Option<&LinearEmbedding>,
    needed: Option<&[bool]>,
) -> Result<Vec<FeatureMap>> {
    (0..data.images.len())
        .map(|v| {
            if needed.is_some_and(|n| !n[v]) {
                return Ok(FeatureMap {
                    view: v,
                    width: 0,
                    height: 0,
                    channels: 0,
                    data: Vec::new(),
                });
            }
            match config.mode {
                FrontendMode::External => data
                    .features
                    .as_ref()
                    .map(|f| f[v].clone())
                    .ok_or_else(|| Error::InvalidConfig("external frontend without loaded features".into())),
                _ => compute_features(v, &data.images[v], config, embedding),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub frontend: FrontendConfig,
    pub bp: BpConfig,
    pub reduction: DepthReduction,
    pub embedding: Option<LinearEmbedding>,
    /// Skip BP and use each ray's surface distribution as its posterior.
    pub frontend_only: bool,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub depth: Vec<DepthMap>,
    /// Occupancy belief per voxel (the prior everywhere for frontend-only runs).
    pub beliefs: Vec<f64>,
    /// Per view, row-major: the depth posterior of each pixel that hits the grid.
    pub posteriors: Vec<Vec<Option<Vec<f64>>>>,
    pub cloud: PointCloud,
    pub timings: Vec<(&'static str, Duration)>,
    /// Max absolute message change per BP iteration.
    pub bp_change: Vec<f64>,
}

/// Raw voxel scores of one reference view, memoized over the voxels its
/// rays touch.
struct ScoreTable {
    voxels: Vec<usize>,
    scores: Vec<Option<f64>>,
}

impl ScoreTable {
    fn build(rays: &[Option<RayTraversal>], views: &Views, view: usize, grid: &VoxelGrid, config: &FrontendConfig) -> Self {
        let mut voxels: Vec<usize> = rays.iter().flatten().flat_map(|r| r.voxels.iter().copied()).collect();
        voxels.sort_unstable();
        voxels.dedup();
        let scores = voxels.par_iter().map(|&v| voxel_score(views, view, v, grid, config)).collect();
        ScoreTable { voxels, scores }
    }

    fn get(&self, voxel: usize) -> Option<f64> {
        self.voxels.binary_search(&voxel).ok().and_then(|i| self.scores[i])
    }
}

pub fn reconstruct(data: &Dataset, options: &PipelineOptions) -> Result<Reconstruction> {
    let mut timings = Vec::new();
    let grid = &data.grid;
    let clock = Instant::now();
    let maps = build_feature_maps(data, &options.frontend, options.embedding.as_ref(), None)?;
    timings.push(("features", clock.elapsed()));

    let clock = Instant::now();
    let rays: Vec<Vec<Option<RayTraversal>>> = data.cameras.iter().map(|c| cast_all(c, grid)).collect();
    timings.push(("traversal", clock.elapsed()));

    let clock = Instant::now();
    let adjacency = adjacent_views(&data.cameras, options.frontend.num_adjacent);
    let views = Views {
        cameras: &data.cameras,
        maps: &maps,
        adjacency: &adjacency,
    };
    let mut factors = Vec::new();
    for (v, view_rays) in rays.iter().enumerate() {
        let table = ScoreTable::build(view_rays, &views, v, grid, &options.frontend);
        let scored: Vec<RayFactor> = view_rays
            .par_iter()
            .flatten()
            .map(|r| {
                let raw: Vec<Option<f64>> = r.voxels.iter().map(|&x| table.get(x)).collect();
                let (s, _, _) = softmax_scores(&raw, options.frontend.temperature);
                RayFactor::new(r.clone(), s)
            })
            .collect::<Result<_>>()?;
        factors.extend(scored);
    }
    timings.push(("scoring", clock.elapsed()));

    let clock = Instant::now();
    let (posteriors, beliefs, bp_change): (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) = if options.frontend_only {
        (factors.iter().map(|f| f.s.clone()).collect(), vec![options.bp.unary.gamma; grid.len()], Vec::new())
    } else {
        let state = run_bp(grid.len(), &factors, &options.bp);
        let post = (0..factors.len())
            .into_par_iter()
            .map(|k| match options.bp.posterior {
                PosteriorMode::Cavity => depth_posterior_from(&factors[k].s, state.cavity(k)),
                PosteriorMode::Belief => {
                    let b: Vec<f64> = factors[k].traversal.voxels.iter().map(|&v| state.beliefs[v]).collect();
                    depth_posterior_from_beliefs(&b)
                }
            })
            .collect();
        (post, state.beliefs, state.max_change)
    };
    timings.push(("inference", clock.elapsed()));

    let clock = Instant::now();
    let mut depth: Vec<DepthMap> = data.cameras.iter().enumerate().map(|(v, c)| DepthMap::invalid(v, c.width, c.height)).collect();
    let mut per_pixel: Vec<Vec<Option<Vec<f64>>>> = data.cameras.iter().map(|c| vec![None; c.width * c.height]).collect();
    for (f, p) in factors.iter().zip(posteriors) {
        let id = f.ray_id();
        depth[id.view].set(id.row, id.col, posterior_to_depth(&p, &f.traversal.depths, options.reduction));
        per_pixel[id.view][id.row * data.cameras[id.view].width + id.col] = Some(p);
    }
    let mut cloud = PointCloud::default();
    for (d, c) in depth.iter().zip(&data.cameras) {
        cloud.extend(depth_to_cloud(d, c));
    }
    timings.push(("depth", clock.elapsed()));
    Ok(Reconstruction {
        depth,
        beliefs,
        posteriors: per_pixel,
        cloud,
        timings,
        bp_change,
    })
}

/// Beliefs as an `(Nx, Ny, Nz)` row-major tensor.
pub fn belief_tensor(grid: &VoxelGrid, beliefs: &[f64]) -> Result<Tensor> {
    let [nx, ny, nz] = grid.dims;
    let mut data = vec![0.0f32; grid.len()];
    for (i, &b) in beliefs.iter().enumerate() {
        let [x, y, z] = grid.coords(i);
        data[(x * ny + y) * nz + z] = b as f32;
    }
    Tensor::new(vec![nx, ny, nz], data)
}

/// Depth posteriors of one view as an `(H, W, Dmax)` tensor padded with zeros.
pub fn posterior_tensor(width: usize, height: usize, posteriors: &[Option<Vec<f64>>]) -> Result<Tensor> {
    let dmax = posteriors.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mut data = vec![0.0f32; width * height * dmax];
    for (p, post) in posteriors.iter().enumerate() {
        if let Some(post) = post {
            for (i, &x) in post.iter().enumerate() {
                data[p * dmax + i] = x as f32;
            }
        }
    }
    Tensor::new(vec![height, width, dmax], data)
}

/// Writes depth maps (PFM), posteriors and beliefs (tensor files) and the
/// point cloud (PLY) under `dir`; files are named by manifest view id.
pub fn write_reconstruction(dir: &Path, data: &Dataset, recon: &Reconstruction) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (v, d) in recon.depth.iter().enumerate() {
        let id = data.view_ids[v];
        io::write_pfm(&dir.join(format!("depth_{id:03}.pfm")), &d.to_image())?;
        let cam = &data.cameras[v];
        io::write_tensor(
            &dir.join(format!("posterior_{id:03}.rnt")),
            &posterior_tensor(cam.width, cam.height, &recon.posteriors[v])?,
        )?;
    }
    io::write_tensor(&dir.join("beliefs.rnt"), &belief_tensor(&data.grid, &recon.beliefs)?)?;
    io::write_ply(&dir.join("cloud.ply"), &recon.cloud.points)
}

/// Reads predicted depth maps written by [`write_reconstruction`].
pub fn read_predicted_depths(dir: &Path, data: &Dataset) -> Result<Vec<DepthMap>> {
    data.view_ids
        .iter()
        .enumerate()
        .map(|(v, id)| Ok(DepthMap::from_image(v, &io::read_pfm(&dir.join(format!("depth_{id:03}.pfm")))?)))
        .collect()
}
