//! Procedural test scenes and brute-force inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::DepthMap;
use crate::geometry::{traverse, Camera, Vec3, VoxelGrid};
use crate::io::Image;
use crate::mrf::RayFactor;

/// Sum of three plane waves with incommensurate frequencies, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub waves: Vec<([f64; 3], f64)>,
}

impl Texture {
    /// Random wave directions; `frequency` is the base spatial frequency in
    /// cycles per world unit.
    pub fn random(rng: &mut impl Rng, frequency: f64) -> Self {
        let factors = [1.0, std::f64::consts::SQRT_2, 0.5 * (1.0 + 5f64.sqrt())];
        let waves = factors
            .iter()
            .map(|f| {
                let d = loop {
                    let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    if v.norm() > 0.2 && v.norm() <= 1.0 {
                        break v.normalize();
                    }
                };
                let k = d * (2.0 * std::f64::consts::PI * frequency * f);
                ([k.x, k.y, k.z], rng.random_range(0.0..2.0 * std::f64::consts::PI))
            })
            .collect();
        Texture { waves }
    }

    pub fn value(&self, p: &Vec3) -> f64 {
        let n = self.waves.len() as f64;
        0.5 + self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p.x + k[1] * p.y + k[2] * p.z + phase).sin())
            .sum::<f64>()
            / (2.0 * n)
    }
}

/// Background intensity of rays that hit nothing.
const BACKGROUND: f32 = 0.5;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub grid: VoxelGrid,
    pub occupancy: Vec<bool>,
    pub texture: Texture,
    pub cameras: Vec<Camera>,
    pub gt_depth: Vec<DepthMap>,
    pub images: Vec<Image>,
}

/// Ray parameter where `origin + t dir` enters the axis-aligned box.
fn box_entry(lo: &Vec3, hi: &Vec3, origin: &Vec3, dir: &Vec3) -> f64 {
    let mut t0 = 0.0f64;
    for a in 0..3 {
        if dir[a] != 0.0 {
            let ta = (lo[a] - origin[a]) / dir[a];
            let tb = (hi[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
        }
    }
    t0
}

/// Where the texture is evaluated for a visible surface point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Albedo {
    /// At the point itself.
    Surface,
    /// At the center of the voxel the point belongs to; each voxel face shows
    /// one flat intensity.
    Voxel,
}

/// First occupied voxel along the ray through `(u, v)` and the distance at
/// which the ray enters it.
fn first_hit(grid: &VoxelGrid, occupancy: &[bool], cam: &Camera, u: f64, v: f64) -> Option<(usize, f64)> {
    let origin = cam.center();
    let dir = cam.direction(u, v);
    let voxel = traverse(grid, &origin, &dir)?.into_iter().find(|&x| occupancy[x])?;
    let c = grid.voxel_center(voxel).expect("voxel in grid");
    let half = Vec3::repeat(grid.voxel_size / 2.0);
    Some((voxel, box_entry(&(c - half), &(c + half), &origin, &dir)))
}

fn first_hit_value(grid: &VoxelGrid, occupancy: &[bool], texture: &Texture, albedo: Albedo, cam: &Camera, u: f64, v: f64) -> f64 {
    match first_hit(grid, occupancy, cam, u, v) {
        Some((voxel, t)) => match albedo {
            Albedo::Surface => texture.value(&(cam.center() + cam.direction(u, v) * t)),
            Albedo::Voxel => texture.value(&grid.voxel_center(voxel).expect("voxel in grid")),
        },
        None => BACKGROUND as f64,
    }
}

/// Analytic solid used for smooth rendering.
#[derive(Debug, Clone, PartialEq)]
pub enum Solid {
    Box { lo: Vec3, hi: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Solid {
    /// Smallest ray parameter at which the ray is inside the solid.
    pub fn entry(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Solid::Box { lo, hi } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < lo[a] || origin[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (lo[a] - origin[a]) / dir[a];
                    let tb = (hi[a] - origin[a]) / dir[a];
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                (t0 <= t1).then_some(t0)
            }
            Solid::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                let t = if t >= 0.0 { t } else { -b + disc.sqrt() };
                (t >= 0.0).then_some(if c <= 0.0 { 0.0 } else { t })
            }
        }
    }
}

fn solids_value(solids: &[Solid], texture: &Texture, cam: &Camera, u: f64, v: f64) -> f64 {
    let origin = cam.center();
    let dir = cam.direction(u, v);
    solids
        .iter()
        .filter_map(|s| s.entry(&origin, &dir))
        .min_by(f64::total_cmp)
        .map_or(BACKGROUND as f64, |t| texture.value(&(origin + dir * t)))
}

impl SyntheticScene {
    /// Ray casts every camera against the occupancy grid.
    /// Each pixel averages `supersample`² sub-pixel rays; depth comes from the
    /// pixel-center ray.
    pub fn render(
        grid: VoxelGrid,
        occupancy: Vec<bool>,
        texture: Texture,
        cameras: Vec<Camera>,
        albedo: Albedo,
        supersample: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::render_with(grid, occupancy, texture, cameras, None, albedo, supersample, noise_sigma, seed)
    }

    /// Like [`SyntheticScene::render`], but intensities come from the analytic
    /// `solids` with the texture evaluated on their surfaces. Depth still
    /// follows the occupancy grid.
    pub fn render_solids(
        grid: VoxelGrid,
        occupancy: Vec<bool>,
        solids: &[Solid],
        texture: Texture,
        cameras: Vec<Camera>,
        supersample: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::render_with(grid, occupancy, texture, cameras, Some(solids), Albedo::Surface, supersample, noise_sigma, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn render_with(
        grid: VoxelGrid,
        occupancy: Vec<bool>,
        texture: Texture,
        cameras: Vec<Camera>,
        solids: Option<&[Solid]>,
        albedo: Albedo,
        supersample: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let supersample = supersample.max(1);
        if occupancy.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "occupancy has {} entries for {} voxels",
                occupancy.len(),
                grid.len()
            )));
        }
        let mut gt_depth = Vec::with_capacity(cameras.len());
        let mut images = Vec::with_capacity(cameras.len());
        for (view, cam) in cameras.iter().enumerate() {
            let (w, h) = (cam.width, cam.height);
            let pixels: Vec<(Option<f64>, f32)> = (0..w * h)
                .into_par_iter()
                .map(|p| {
                    let (row, col) = (p / w, p % w);
                    let depth = first_hit(&grid, &occupancy, cam, col as f64 + 0.5, row as f64 + 0.5)
                        .map(|(v, _)| (grid.voxel_center(v).expect("voxel in grid") - cam.center()).norm());
                    let mut acc = 0.0;
                    for a in 0..supersample {
                        for b in 0..supersample {
                            let u = col as f64 + (b as f64 + 0.5) / supersample as f64;
                            let v = row as f64 + (a as f64 + 0.5) / supersample as f64;
                            acc += match solids {
                                Some(solids) => solids_value(solids, &texture, cam, u, v),
                                None => first_hit_value(&grid, &occupancy, &texture, albedo, cam, u, v),
                            };
                        }
                    }
                    (depth, (acc / (supersample * supersample) as f64) as f32)
                })
                .collect();
            let mut depth = DepthMap::invalid(view, w, h);
            let mut data = Vec::with_capacity(w * h);
            for (p, (d, value)) in pixels.into_iter().enumerate() {
                if let Some(d) = d {
                    depth.set(p / w, p % w, d);
                }
                data.push(value);
            }
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (view as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                for x in &mut data {
                    *x = (*x as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
            gt_depth.push(depth);
            images.push(Image::new(w, h, data));
        }
        Ok(SyntheticScene {
            grid,
            occupancy,
            texture,
            cameras,
            gt_depth,
            images,
        })
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub dims: [usize; 3],
    pub num_cameras: usize,
    /// Number of solid primitives; drawn from `1..=3` when `None`.
    pub primitives: Option<usize>,
    /// Whether to add a ground slab; random when `None`.
    pub floor: Option<bool>,
    pub image_size: usize,
    pub focal: f64,
    /// Camera distance from the grid centroid in grid extents.
    pub radius: f64,
    /// Azimuth span of the camera ring in degrees; 360 closes the ring.
    pub arc: f64,
    /// Height of the look-at point as a fraction of the grid height.
    pub target_height: f64,
    /// Camera elevation range in degrees.
    pub elevation: [f64; 2],
    pub albedo: Albedo,
    /// Render the primitives analytically, with their surfaces passing through
    /// the outermost occupied voxel centers, instead of ray casting the grid.
    pub smooth: bool,
    /// Sub-pixel rays per image axis.
    pub supersample: usize,
    pub noise_sigma: f64,
    /// Base texture frequency in cycles per voxel.
    pub texture_frequency: f64,
}

impl SceneConfig {
    pub fn new(dims: [usize; 3], num_cameras: usize) -> Self {
        let n = *dims.iter().max().unwrap_or(&1) as f64;
        SceneConfig {
            dims,
            num_cameras,
            primitives: None,
            floor: None,
            image_size: (1.5 * n).round().max(8.0) as usize,
            focal: 2.2 * n,
            radius: 2.0,
            arc: 360.0,
            target_height: 0.5,
            elevation: [25.0, 45.0],
            albedo: Albedo::Voxel,
            smooth: true,
            supersample: 3,
            noise_sigma: 0.0,
            texture_frequency: 0.3,
        }
    }
}

const MAX_RETRIES: u64 = 16;

/// Seeded scene in the unit cube with cameras on a ring around it.
pub fn generate_scene(seed: u64, dims: [usize; 3], num_cameras: usize) -> Result<SyntheticScene> {
    generate_scene_with(seed, &SceneConfig::new(dims, num_cameras))
}

pub fn generate_scene_with(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    if config.dims.iter().any(|&d| d == 0 || d > 64) {
        return Err(Error::InvalidConfig("scene dims must be in 1..=64".into()));
    }
    if config.num_cameras == 0 {
        return Err(Error::InvalidConfig("scene needs at least one camera".into()));
    }
    let mut last = String::new();
    for attempt in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(MAX_RETRIES).wrapping_add(attempt));
        let scene = attempt_scene(&mut rng, config)?;
        match scene.gt_depth.iter().position(|d| d.valid_count() == 0) {
            None => return Ok(scene),
            Some(v) => last = format!("camera {v} sees no occupied voxel"),
        }
    }
    Err(Error::DegenerateScene(last))
}

fn attempt_scene(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Result<SyntheticScene> {
    let n = *config.dims.iter().max().expect("three dims") as f64;
    let voxel_size = 1.0 / n;
    let grid = VoxelGrid::new([0.0; 3], voxel_size, config.dims)?;
    let extent = Vec3::new(
        config.dims[0] as f64 * voxel_size,
        config.dims[1] as f64 * voxel_size,
        config.dims[2] as f64 * voxel_size,
    );
    let mut occupancy = vec![false; grid.len()];
    let mut solids = Vec::new();
    let count = config.primitives.unwrap_or_else(|| rng.random_range(1..=3));
    for _ in 0..count {
        let center = Vec3::new(
            rng.random_range(0.3..0.7) * extent.x,
            rng.random_range(0.3..0.7) * extent.y,
            rng.random_range(0.2..0.5) * extent.z,
        );
        let sphere = rng.random_bool(0.5);
        let half = Vec3::new(
            rng.random_range(0.1..0.2) * extent.x,
            rng.random_range(0.1..0.2) * extent.y,
            rng.random_range(0.1..0.25) * extent.z,
        );
        let radius = rng.random_range(0.12..0.22) * extent.min();
        let (mut lo, mut hi, mut reach) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY), 0.0f64);
        for (i, occ) in occupancy.iter_mut().enumerate() {
            let c = grid.voxel_center(i)?;
            let d = c - center;
            let inside = if sphere {
                d.norm() <= radius
            } else {
                d.x.abs() <= half.x && d.y.abs() <= half.y && d.z.abs() <= half.z
            };
            if inside {
                lo = lo.inf(&c);
                hi = hi.sup(&c);
                reach = reach.max(d.norm());
            }
            *occ |= inside;
        }
        if lo.x <= hi.x {
            solids.push(if sphere { Solid::Sphere { center, radius: reach } } else { Solid::Box { lo, hi } });
        }
    }
    if config.floor.unwrap_or_else(|| rng.random_bool(0.5)) {
        for (i, occ) in occupancy.iter_mut().enumerate() {
            if grid.coords(i)[2] < 2 {
                *occ = true;
            }
        }
        let origin = Vec3::from(grid.origin);
        let half = voxel_size / 2.0;
        let mut top = origin + extent - Vec3::repeat(half);
        top.z = origin.z + 1.5 * voxel_size;
        solids.push(Solid::Box { lo: origin + Vec3::repeat(half), hi: top });
    }
    let texture = Texture::random(rng, config.texture_frequency / voxel_size);
    let centroid = grid.centroid();
    let target = Vec3::new(centroid.x, centroid.y, grid.origin[2] + config.target_height * extent.z);
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    let cameras = (0..config.num_cameras)
        .map(|k| {
            let step = if config.arc >= 360.0 || config.num_cameras == 1 {
                config.arc / config.num_cameras as f64
            } else {
                config.arc / (config.num_cameras - 1) as f64
            };
            let azimuth = offset + (step * k as f64).to_radians();
            let elevation = rng.random_range(config.elevation[0]..=config.elevation[1]).to_radians();
            let r = config.radius * extent.max();
            let eye = target + Vec3::new(azimuth.cos() * elevation.cos(), azimuth.sin() * elevation.cos(), elevation.sin()) * r;
            Camera::look_at(k, eye, target, Vec3::z(), config.focal, config.image_size, config.image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = rng.random();
    if config.smooth {
        SyntheticScene::render_solids(grid, occupancy, &solids, texture, cameras, config.supersample, config.noise_sigma, seed)
    } else {
        SyntheticScene::render(grid, occupancy, texture, cameras, config.albedo, config.supersample, config.noise_sigma, seed)
    }
}

/// Exact marginals of the full model over the voxels touched by rays.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMarginals {
    /// Occupancy marginal of every grid voxel.
    pub voxel: Vec<f64>,
    /// Distribution of the first occupied voxel along each factor.
    pub depth: Vec<Vec<f64>>,
}

pub const ENUMERATION_LIMIT: usize = 20;

/// Enumerates every joint occupancy state of the touched voxels, weighting
/// each by the unary priors times every ray potential.
pub fn exact_marginals(num_voxels: usize, factors: &[RayFactor], gamma: f64) -> Result<ExactMarginals> {
    let mut touched: Vec<usize> = factors.iter().flat_map(|f| f.traversal.voxels.iter().copied()).collect();
    touched.sort_unstable();
    touched.dedup();
    if touched.len() > ENUMERATION_LIMIT {
        return Err(Error::TooLargeForEnumeration {
            voxels: touched.len(),
            limit: ENUMERATION_LIMIT,
        });
    }
    let bit = |v: usize| touched.binary_search(&v).expect("touched voxel");
    let rays: Vec<Vec<usize>> = factors.iter().map(|f| f.traversal.voxels.iter().map(|&v| bit(v)).collect()).collect();
    let m = touched.len();
    let states = 1u64 << m;
    let chunks = 64u64.min(states);
    let per = states.div_ceil(chunks);
    let partial: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut z = 0.0;
            let mut marg = vec![0.0; m];
            let mut depth: Vec<Vec<f64>> = rays.iter().map(|r| vec![0.0; r.len()]).collect();
            let mut first = vec![usize::MAX; rays.len()];
            for state in c * per..((c + 1) * per).min(states) {
                let mut w: f64 = (0..m).map(|b| if state >> b & 1 == 1 { gamma } else { 1.0 - gamma }).product();
                for (k, r) in rays.iter().enumerate() {
                    match r.iter().position(|&b| state >> b & 1 == 1) {
                        Some(i) => {
                            w *= factors[k].s[i];
                            first[k] = i;
                        }
                        None => {
                            w = 0.0;
                            first[k] = usize::MAX;
                        }
                    }
                }
                if w == 0.0 {
                    continue;
                }
                z += w;
                for (b, mb) in marg.iter_mut().enumerate() {
                    if state >> b & 1 == 1 {
                        *mb += w;
                    }
                }
                for (k, &i) in first.iter().enumerate() {
                    depth[k][i] += w;
                }
            }
            (z, marg, depth)
        })
        .collect();
    let mut z = 0.0;
    let mut marg = vec![0.0; m];
    let mut depth: Vec<Vec<f64>> = rays.iter().map(|r| vec![0.0; r.len()]).collect();
    for (pz, pm, pd) in partial {
        z += pz;
        marg.iter_mut().zip(pm).for_each(|(a, b)| *a += b);
        for (d, p) in depth.iter_mut().zip(pd) {
            d.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    if !(z > 0.0) {
        return Err(Error::DegenerateScene("every occupancy state has zero weight".into()));
    }
    let mut voxel = vec![gamma; num_voxels];
    for (b, &v) in touched.iter().enumerate() {
        voxel[v] = marg[b] / z;
    }
    for d in &mut depth {
        d.iter_mut().for_each(|x| *x /= z);
    }
    Ok(ExactMarginals { voxel, depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cast_ray, RayId, RayTraversal};

    fn factor(view: usize, voxels: Vec<usize>, s: Vec<f64>) -> RayFactor {
        let depths = (0..voxels.len()).map(|i| i as f64 + 1.0).collect();
        RayFactor::new(RayTraversal { ray_id: RayId { view, row: 0, col: 0 }, voxels, depths }, s).unwrap()
    }

    #[test]
    fn hand_checked_two_voxel_ray() {
        let ex = exact_marginals(2, &[factor(0, vec![0, 1], vec![1.0, 0.0])], 0.5).unwrap();
        assert!((ex.voxel[0] - 1.0).abs() < 1e-15);
        assert!((ex.voxel[1] - 0.5).abs() < 1e-15);
        assert_eq!(ex.depth[0], vec![1.0, 0.0]);
    }

    #[test]
    fn no_rays_gives_prior() {
        let ex = exact_marginals(4, &[], 0.3).unwrap();
        assert_eq!(ex.voxel, vec![0.3; 4]);
    }

    #[test]
    fn enumeration_limit() {
        let f = factor(0, (0..21).collect(), vec![1.0 / 21.0; 21]);
        assert!(matches!(exact_marginals(30, &[f], 0.1), Err(Error::TooLargeForEnumeration { .. })));
    }

    #[test]
    fn relabeling_voxels_is_harmless() {
        let fs = vec![factor(0, vec![0, 1, 2], vec![0.2, 0.5, 0.3]), factor(1, vec![3, 1, 4], vec![0.6, 0.3, 0.1])];
        let relabel = [4, 2, 0, 1, 3];
        let gs: Vec<RayFactor> = fs
            .iter()
            .map(|f| factor(f.ray_id().view, f.traversal.voxels.iter().map(|&v| relabel[v]).collect(), f.s.clone()))
            .collect();
        let a = exact_marginals(5, &fs, 0.2).unwrap();
        let b = exact_marginals(5, &gs, 0.2).unwrap();
        for v in 0..5 {
            assert!((a.voxel[v] - b.voxel[relabel[v]]).abs() < 1e-14);
        }
        for (x, y) in a.depth.iter().flatten().zip(b.depth.iter().flatten()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn certain_occupancy_stops_at_first_voxel() {
        let ex = exact_marginals(3, &[factor(0, vec![0, 1, 2], vec![0.1, 0.6, 0.3])], 1.0 - 1e-9).unwrap();
        assert!(ex.depth[0][0] > 1.0 - 1e-6);
    }

    #[test]
    fn empty_scene_has_no_depth() {
        let grid = VoxelGrid::cube(0.0, 1.0, 4).unwrap();
        let cam = Camera::look_at(0, Vec3::new(0.5, 0.5, -2.0), Vec3::new(0.5, 0.5, 0.5), Vec3::y(), 8.0, 6, 6).unwrap();
        let tex = Texture::random(&mut ChaCha8Rng::seed_from_u64(0), 2.0);
        let scene = SyntheticScene::render(grid.clone(), vec![false; grid.len()], tex, vec![cam], Albedo::Voxel, 1, 0.0, 0).unwrap();
        assert_eq!(scene.gt_depth[0].valid_count(), 0);
    }

    #[test]
    fn single_voxel_depth() {
        let grid = VoxelGrid::cube(0.0, 1.0, 5).unwrap();
        let mut occ = vec![false; grid.len()];
        let center = grid.index(2, 2, 2);
        occ[center] = true;
        let eye = Vec3::new(0.5, 0.5, -2.0);
        let cam = Camera::look_at(0, eye, Vec3::new(0.5, 0.5, 0.5), Vec3::y(), 10.0, 7, 7).unwrap();
        let tex = Texture::random(&mut ChaCha8Rng::seed_from_u64(0), 2.0);
        let scene = SyntheticScene::render(grid.clone(), occ, tex, vec![cam], Albedo::Voxel, 1, 0.0, 0).unwrap();
        let d = scene.gt_depth[0].get(3, 3).unwrap();
        let expect = (grid.voxel_center(center).unwrap() - eye).norm();
        assert!((d - expect).abs() <= grid.voxel_size);
    }

    #[test]
    fn floor_texture_matches_plane_intersection() {
        let grid = VoxelGrid::cube(0.0, 1.0, 8).unwrap();
        let occ: Vec<bool> = (0..grid.len()).map(|i| grid.coords(i)[2] < 2).collect();
        let cam = Camera::look_at(0, Vec3::new(0.5, -1.0, 2.0), Vec3::new(0.5, 0.5, 0.25), Vec3::z(), 12.0, 10, 10).unwrap();
        let tex = Texture::random(&mut ChaCha8Rng::seed_from_u64(5), 3.0);
        let scene = SyntheticScene::render(grid, occ, tex.clone(), vec![cam.clone()], Albedo::Surface, 1, 0.0, 0).unwrap();
        let plane_z = 0.25;
        let mut checked = 0;
        for row in 0..10 {
            for col in 0..10 {
                let o = cam.center();
                let d = cam.pixel_direction(row, col);
                let t = (plane_z - o.z) / d.z;
                let hit = o + d * t;
                let inside = (0.0..1.0).contains(&hit.x) && (0.0..1.0).contains(&hit.y);
                // skip hits near voxel edges where the side of a boundary voxel could be hit first
                if t > 0.0 && inside && hit.x > 0.01 && hit.y > 0.01 && scene.gt_depth[0].get(row, col).is_some() {
                    let expect = tex.value(&hit) as f32;
                    assert!((scene.images[0].at(row, col) - expect).abs() < 1e-5, "pixel ({row},{col})");
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn generation_is_deterministic_and_seed_dependent() {
        let a = generate_scene(3, [12, 12, 12], 4).unwrap();
        let b = generate_scene(3, [12, 12, 12], 4).unwrap();
        assert_eq!(a.occupancy, b.occupancy);
        assert_eq!(a.images, b.images);
        assert_eq!(a.gt_depth, b.gt_depth);
        let c = generate_scene(4, [12, 12, 12], 4).unwrap();
        assert_ne!(a.occupancy, c.occupancy);
        assert!(a.gt_depth.iter().all(|d| d.valid_count() > 0));
    }

    #[test]
    fn gt_depth_is_first_occupied_voxel() {
        let scene = generate_scene(11, [10, 10, 10], 3).unwrap();
        for (cam, depth) in scene.cameras.iter().zip(&scene.gt_depth) {
            for row in 0..cam.height {
                for col in 0..cam.width {
                    let expect = cast_ray(cam, row, col, &scene.grid).ok().and_then(|r| {
                        r.voxels.iter().position(|&v| scene.occupancy[v]).map(|i| r.depths[i])
                    });
                    assert_eq!(depth.get(row, col), expect);
                }
            }
        }
    }

    #[test]
    fn solid_entries_match_closed_form() {
        let o = Vec3::new(0.0, 0.0, 0.0);
        let d = Vec3::new(1.0, 0.0, 0.0);
        let b = Solid::Box { lo: Vec3::new(2.0, -1.0, -1.0), hi: Vec3::new(3.0, 1.0, 1.0) };
        assert_eq!(b.entry(&o, &d), Some(2.0));
        assert_eq!(b.entry(&o, &-d), None);
        let s = Solid::Sphere { center: Vec3::new(5.0, 0.6, 0.0), radius: 1.0 };
        assert!((s.entry(&o, &d).unwrap() - (5.0 - 0.8)).abs() < 1e-12);
        assert_eq!(Solid::Sphere { center: o, radius: 1.0 }.entry(&o, &d), Some(0.0));
        assert_eq!(Solid::Sphere { center: Vec3::new(5.0, 1.5, 0.0), radius: 1.0 }.entry(&o, &d), None);
    }

    #[test]
    fn smooth_floor_passes_through_voxel_centers() {
        let mut cfg = SceneConfig::new([8; 3], 2);
        cfg.primitives = Some(0);
        cfg.floor = Some(true);
        cfg.supersample = 1;
        let scene = generate_scene_with(3, &cfg).unwrap();
        let plane_z = 1.5 / 8.0;
        let mut checked = 0;
        for (cam, image) in scene.cameras.iter().zip(&scene.images) {
            for row in 0..cam.height {
                for col in 0..cam.width {
                    let o = cam.center();
                    let d = cam.pixel_direction(row, col);
                    let hit = o + d * ((plane_z - o.z) / d.z);
                    if (0.07..0.93).contains(&hit.x) && (0.07..0.93).contains(&hit.y) {
                        assert!((image.at(row, col) - scene.texture.value(&hit) as f32).abs() < 1e-5);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 50);
    }
}
