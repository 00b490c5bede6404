//! Pinhole cameras, the voxel grid and ordered ray/grid traversal.
//!
//! Pixel `(row, col)` covers the continuous image square
//! `[col, col + 1) x [row, row + 1)`, so rays are cast through
//! `(col + 0.5, row + 0.5)`. The voxel grid is axis aligned and isotropic,
//! and every cell is the half-open box `[k, k + 1)` on each axis in grid units.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOLERANCE: f64 = 1e-6;

/// A calibrated pinhole view. `r` and `t` map world points into the camera
/// frame: `x_cam = r * x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

/// Continuous pixel position of a projected point together with its depth
/// along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Projection {
    pub fn in_image(&self, camera: &Camera) -> bool {
        self.u >= 0.0 && self.v >= 0.0 && self.u < camera.width as f64 && self.v < camera.height as f64
    }
}

impl Camera {
    pub fn new(id: usize, k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Self> {
        let camera = Camera {
            id,
            k,
            r,
            t,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCamera("K must be upper triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera(
                "K needs a positive diagonal with K[2][2] = 1".into(),
            ));
        }
        if k.iter().any(|x| !x.is_finite())
            || self.r.iter().any(|x| !x.is_finite())
            || self.t.iter().any(|x| !x.is_finite())
        {
            return Err(Error::InvalidCamera("non-finite entries".into()));
        }
        let gram = self.r.transpose() * self.r - Mat3::identity();
        if gram.amax() > ROTATION_TOLERANCE || (self.r.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidCamera(
                "R must be orthonormal with determinant +1".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        Ok(())
    }

    /// Builds a camera at `eye` looking at `target`. The image `y` axis
    /// points along `-up` projected into the image plane.
    pub fn look_at(
        id: usize,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let k = Mat3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(id, k, r, t, width, height)
    }

    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    pub fn project(&self, point: &Vec3) -> Result<Projection> {
        let cam = self.r * point + self.t;
        if cam.z <= 0.0 {
            return Err(Error::BehindCamera { z: cam.z });
        }
        let h = self.k * cam;
        Ok(Projection {
            u: h.x / h.z,
            v: h.y / h.z,
            z: cam.z,
        })
    }

    /// 4x4 world-to-image matrix `[K 0; 0 1] * [R t; 0 1]`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        let mut intr = Matrix4::identity();
        intr.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.k);
        intr * ext
    }

    /// Unit world-space direction of the ray through continuous pixel `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let k_inv = self
            .k
            .try_inverse()
            .expect("validated intrinsics are invertible");
        let d_cam = k_inv * Vec3::new(u, v, 1.0);
        (self.r.transpose() * d_cam).normalize()
    }

    pub fn pixel_direction(&self, row: usize, col: usize) -> Vec3 {
        self.direction(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// World point at Euclidean distance `distance` from the camera center
    /// along the ray of continuous pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, distance: f64) -> Vec3 {
        self.center() + self.direction(u, v) * distance
    }

    /// Same view rendered at `1 / factor` resolution (box downsampling).
    pub fn downscaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] /= f;
            k[(1, c)] /= f;
        }
        Camera {
            k,
            width: (self.width / factor).max(1),
            height: (self.height / factor).max(1),
            ..self.clone()
        }
    }
}

/// Reference implementation of [`Camera::project`] via the composed 4x4
/// homogeneous transform.
pub fn project_homogeneous(camera: &Camera, point: &Vec3) -> (f64, f64, f64) {
    let h = camera.homogeneous() * Vector4::new(point.x, point.y, point.z, 1.0);
    (h.x / h.z, h.y / h.z, h.z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidGrid("voxel size must be positive".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid("dimensions must be positive".into()));
        }
        if origin.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(VoxelGrid {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Grid of `n^3` voxels covering the cube `[lo, hi]^3`.
    pub fn cube(lo: f64, hi: f64, n: usize) -> Result<Self> {
        VoxelGrid::new([lo; 3], (hi - lo) / n as f64, [n; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_center(&self, idx: usize) -> Result<Vec3> {
        if idx >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: self.len(),
            });
        }
        let c = self.coords(idx);
        Ok(Vec3::from_fn(|a, _| {
            self.origin[a] + self.voxel_size * (c[a] as f64 + 0.5)
        }))
    }

    pub fn min_corner(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn max_corner(&self) -> Vec3 {
        Vec3::from_fn(|a, _| self.origin[a] + self.voxel_size * self.dims[a] as f64)
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min_corner() + self.max_corner()) / 2.0
    }

    /// Voxel containing `p` under half-open cell intervals, if any.
    pub fn locate(&self, p: &Vec3) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let g = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if g < 0.0 || g >= self.dims[a] as f64 {
                return None;
            }
            c[a] = g as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Parameter interval `[t_enter, t_exit)` of the ray `origin + t * dir`,
    /// `t >= 0`, inside the half-open grid box.
    pub fn clip(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let lo = self.min_corner();
        let hi = self.max_corner();
        let mut t_enter = 0.0f64;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < lo[a] || origin[a] >= hi[a] {
                    return None;
                }
            } else {
                let t1 = (lo[a] - origin[a]) / dir[a];
                let t2 = (hi[a] - origin[a]) / dir[a];
                t_enter = t_enter.max(t1.min(t2));
                t_exit = t_exit.min(t1.max(t2));
            }
        }
        (t_enter < t_exit).then_some((t_enter, t_exit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RayId {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayTraversal {
    pub ray_id: RayId,
    pub voxels: Vec<usize>,
    /// Camera-center to voxel-center distances, near to far.
    pub depths: Vec<f64>,
}

impl RayTraversal {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Voxels pierced by the ray `origin + t * dir` (`t >= 0`), near to far.
///
/// Incremental grid walk: per axis track the ray parameter of the next cell
/// boundary and always step across the nearest one.
pub fn traverse(grid: &VoxelGrid, origin: &Vec3, dir: &Vec3) -> Option<Vec<usize>> {
    let (t_enter, t_exit) = grid.clip(origin, dir)?;
    let size = grid.voxel_size;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let g = (origin[a] + dir[a] * t_enter - grid.origin[a]) / size;
        let n = grid.dims[a] as i64;
        // Cell occupied immediately after entering.
        let c = if dir[a] < 0.0 { g.ceil() as i64 - 1 } else { g.floor() as i64 };
        cell[a] = c.clamp(0, n - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_delta[a] = size / dir[a];
            t_max[a] = (grid.origin[a] + (cell[a] + 1) as f64 * size - origin[a]) / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_delta[a] = -size / dir[a];
            t_max[a] = (grid.origin[a] + cell[a] as f64 * size - origin[a]) / dir[a];
        }
    }
    let bound: usize = grid.dims.iter().sum();
    let mut voxels = Vec::new();
    loop {
        voxels.push(grid.index(cell[0] as usize, cell[1] as usize, cell[2] as usize));
        let mut axis = 0;
        for a in 1..3 {
            if t_max[a] < t_max[axis] {
                axis = a;
            }
        }
        if t_max[axis] >= t_exit || voxels.len() >= bound {
            break;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= grid.dims[axis] as i64 {
            break;
        }
        t_max[axis] += t_delta[axis];
    }
    Some(voxels)
}

/// Traversal of the ray through the center of `(row, col)` in `camera`.
pub fn cast_ray(camera: &Camera, row: usize, col: usize, grid: &VoxelGrid) -> Result<RayTraversal> {
    let origin = camera.center();
    let dir = camera.pixel_direction(row, col);
    let voxels = traverse(grid, &origin, &dir).ok_or(Error::RayMissesGrid)?;
    let depths = voxels
        .iter()
        .map(|&v| (grid.voxel_center(v).expect("traversal stays in grid") - origin).norm())
        .collect();
    Ok(RayTraversal {
        ray_id: RayId {
            view: camera.id,
            row,
            col,
        },
        voxels,
        depths,
    })
}

/// Traversals for every pixel of `camera`, row-major; rays missing the grid
/// are `None`.
pub fn cast_all(camera: &Camera, grid: &VoxelGrid) -> Vec<Option<RayTraversal>> {
    use rayon::prelude::*;
    (0..camera.height * camera.width)
        .into_par_iter()
        .map(|p| cast_ray(camera, p / camera.width, p % camera.width, grid).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(width: usize, height: usize, focal: f64) -> Camera {
        // Camera at x = -3 looking down +x along the voxel row y = z = 2.
        Camera::look_at(
            0,
            Vec3::new(-3.0, 2.5, 2.5),
            Vec3::new(2.0, 2.5, 2.5),
            Vec3::new(0.0, 0.0, 1.0),
            focal,
            width,
            height,
        )
        .unwrap()
    }

    fn random_camera(rng: &mut ChaCha8Rng, grid: &VoxelGrid) -> Camera {
        let c = grid.centroid();
        let extent = grid.max_corner() - grid.min_corner();
        let radius = extent.norm() * rng.random_range(0.8..2.0);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phi = rng.random_range(-1.2..1.2f64);
        let eye = c + Vec3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()) * radius;
        let target = c + Vec3::from_fn(|a, _| rng.random_range(-0.3..0.3) * extent[a]);
        let w = rng.random_range(4..12);
        let h = rng.random_range(4..12);
        Camera::look_at(0, eye, target, Vec3::new(0.0, 0.0, 1.0), rng.random_range(3.0..12.0), w, h).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng) -> VoxelGrid {
        VoxelGrid::new(
            [rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0)],
            rng.random_range(0.2..0.7),
            [rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7)],
        )
        .unwrap()
    }

    #[test]
    fn identity_projection() {
        let cam = Camera::new(0, Mat3::identity(), Mat3::identity(), Vec3::zeros(), 1, 1).unwrap();
        let p = cam.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.u, p.v, p.z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn focal_projection() {
        let k = Mat3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let cam = Camera::new(0, k, Mat3::identity(), Vec3::zeros(), 100, 100).unwrap();
        let p = cam.project(&Vec3::new(0.5, 0.0, 1.0)).unwrap();
        assert!((p.u - 100.0).abs() < 1e-12 && (p.v - 50.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera() {
        let cam = Camera::new(0, Mat3::identity(), Mat3::identity(), Vec3::zeros(), 1, 1).unwrap();
        assert!(matches!(cam.project(&Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera { .. })));
        assert!(matches!(cam.project(&Vec3::new(1.0, 0.0, 0.0)), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn camera_validation() {
        let k = Mat3::identity();
        let bad_r = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Camera::new(0, k, bad_r, Vec3::zeros(), 1, 1).is_err());
        let mut bad_k = Mat3::identity();
        bad_k[(1, 0)] = 0.5;
        assert!(Camera::new(0, bad_k, Mat3::identity(), Vec3::zeros(), 1, 1).is_err());
        assert!(Camera::new(0, k, Mat3::identity(), Vec3::zeros(), 0, 1).is_err());
    }

    #[test]
    fn projection_matches_homogeneous_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = VoxelGrid::cube(-1.0, 1.0, 4).unwrap();
        for _ in 0..200 {
            let cam = random_camera(&mut rng, &grid);
            let p = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let (u, v, z) = project_homogeneous(&cam, &p);
            match cam.project(&p) {
                Ok(proj) => {
                    assert!((proj.u - u).abs() < 1e-9 && (proj.v - v).abs() < 1e-9 && (proj.z - z).abs() < 1e-9);
                }
                Err(_) => assert!(z <= 0.0),
            }
        }
    }

    #[test]
    fn unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = VoxelGrid::cube(-1.0, 1.0, 4).unwrap();
        for _ in 0..200 {
            let cam = random_camera(&mut rng, &grid);
            let row = rng.random_range(0..cam.height);
            let col = rng.random_range(0..cam.width);
            let d = rng.random_range(0.1..10.0);
            let p = cam.unproject(col as f64 + 0.5, row as f64 + 0.5, d);
            let proj = cam.project(&p).unwrap();
            assert!((proj.u - col as f64 - 0.5).abs() < 1e-6);
            assert!((proj.v - row as f64 - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn voxel_centers() {
        let g = VoxelGrid::new([0.0; 3], 1.0, [2, 2, 2]).unwrap();
        assert_eq!(g.voxel_center(0).unwrap(), Vec3::new(0.5, 0.5, 0.5));
        assert_eq!(g.voxel_center(7).unwrap(), Vec3::new(1.5, 1.5, 1.5));
        assert!(matches!(g.voxel_center(8), Err(Error::IndexOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn index_round_trip(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed in 0u64..1000) {
            let g = VoxelGrid::new([0.0; 3], 0.5, [nx, ny, nz]).unwrap();
            let idx = (seed as usize) % g.len();
            let [x, y, z] = g.coords(idx);
            prop_assert_eq!(g.index(x, y, z), idx);
            let c = g.voxel_center(idx).unwrap();
            let coords = [x, y, z];
            for a in 0..3 {
                let lo = g.origin[a] + coords[a] as f64 * g.voxel_size;
                prop_assert!(c[a] > lo && c[a] < lo + g.voxel_size);
            }
            prop_assert_eq!(g.locate(&c), Some(idx));
        }
    }

    #[test]
    fn axis_aligned_ray() {
        let grid = VoxelGrid::new([0.0; 3], 1.0, [4, 4, 4]).unwrap();
        // 1x1 image: the single pixel center is the principal point.
        let cam = axis_camera(1, 1, 1.0);
        let tr = cast_ray(&cam, 0, 0, &grid).unwrap();
        assert_eq!(tr.voxels, (0..4).map(|x| grid.index(x, 2, 2)).collect::<Vec<_>>());
        for w in tr.depths.windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() < 1e-12);
        }
        assert!((tr.depths[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn parallel_ray_outside_misses() {
        let grid = VoxelGrid::new([0.0; 3], 1.0, [4, 4, 4]).unwrap();
        let cam = Camera::look_at(
            0,
            Vec3::new(-3.0, 2.0, 5.0),
            Vec3::new(2.0, 2.0, 5.0),
            Vec3::new(0.0, 0.0, 1.0),
            1.0,
            1,
            1,
        )
        .unwrap();
        assert!(matches!(cast_ray(&cam, 0, 0, &grid), Err(Error::RayMissesGrid)));
        assert!(traverse(&grid, &Vec3::new(-1.0, 4.0, 1.0), &Vec3::new(1.0, 0.0, 0.0)).is_none());
    }

    /// Independent route: sort every grid-plane crossing inside the clipped
    /// interval and locate the midpoint of each sub-interval.
    fn event_oracle(grid: &VoxelGrid, origin: &Vec3, dir: &Vec3) -> Vec<usize> {
        let (t0, t1) = grid.clip(origin, dir).unwrap();
        let mut ts = vec![t0, t1];
        for a in 0..3 {
            if dir[a] == 0.0 {
                continue;
            }
            for k in 0..=grid.dims[a] {
                let t = (grid.origin[a] + k as f64 * grid.voxel_size - origin[a]) / dir[a];
                if t > t0 && t < t1 {
                    ts.push(t);
                }
            }
        }
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut out: Vec<usize> = Vec::new();
        for w in ts.windows(2) {
            if w[1] - w[0] < 1e-12 {
                continue;
            }
            let p = origin + dir * (0.5 * (w[0] + w[1]));
            if let Some(v) = grid.locate(&p) {
                if out.last() != Some(&v) {
                    out.push(v);
                }
            }
        }
        out
    }

    #[test]
    fn traversal_matches_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 1000 {
            let grid = random_grid(&mut rng);
            let cam = random_camera(&mut rng, &grid);
            let row = rng.random_range(0..cam.height);
            let col = rng.random_range(0..cam.width);
            let Ok(tr) = cast_ray(&cam, row, col, &grid) else { continue };
            checked += 1;
            let origin = cam.center();
            let dir = cam.pixel_direction(row, col);
            let (t0, t1) = grid.clip(&origin, &dir).unwrap();
            let mut sampled = std::collections::BTreeSet::new();
            for s in 0..1000 {
                let t = t0 + (t1 - t0) * (s as f64 + 0.5) / 1000.0;
                if let Some(v) = grid.locate(&(origin + dir * t)) {
                    sampled.insert(v);
                }
            }
            let traversed: std::collections::BTreeSet<_> = tr.voxels.iter().copied().collect();
            assert!(sampled.is_subset(&traversed));
            assert_eq!(tr.voxels, event_oracle(&grid, &origin, &dir));
        }
    }

    #[test]
    fn exhaustive_traversal_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let grid = random_grid(&mut rng);
            let cam = random_camera(&mut rng, &grid);
            for tr in cast_all(&cam, &grid).into_iter().flatten() {
                assert!(!tr.is_empty());
                assert!(tr.len() <= grid.dims.iter().sum::<usize>());
                for w in tr.depths.windows(2) {
                    assert!(w[1] > w[0], "depths not increasing: {:?}", tr.depths);
                }
                for w in tr.voxels.windows(2) {
                    let (a, b) = (grid.coords(w[0]), grid.coords(w[1]));
                    let manhattan: i64 = (0..3).map(|i| (a[i] as i64 - b[i] as i64).abs()).sum();
                    assert_eq!(manhattan, 1);
                }
            }
        }
    }
}
