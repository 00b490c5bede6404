//! Plain-text dataset manifests and ingestion.
//!
//! A manifest is a list of `key = value` lines grouped under `[section]`
//! headers. `[view]` may repeat; every other section appears at most once.
//! Relative paths are resolved against the manifest's directory.
//!
//! ```text
//! [dataset]
//! threads = 0
//!
//! [grid]
//! origin = 0 0 0
//! voxel_size = 0.0625
//! dims = 16 16 16
//!
//! [frontend]
//! mode = zncc
//!
//! [view]
//! id = 0
//! image = images/000.pgm
//! camera = cameras/000.txt
//! depth = depth/000.pfm
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::SyntheticScene;
use crate::eval::{DepthMap, DepthReduction, MetricsConfig};
use crate::frontend::{FeatureMap, FrontendConfig};
use crate::geometry::{Camera, VoxelGrid};
use crate::io::{self, Image};
use crate::learn::LearnConfig;
use crate::mrf::{BpConfig, UnaryPotential};

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub id: usize,
    pub image: PathBuf,
    pub camera: PathBuf,
    pub depth: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    /// Rayon worker count; 0 uses every core.
    pub threads: usize,
    /// Images whose larger side exceeds this are box-downsampled on load.
    pub max_dimension: usize,
    pub grid: VoxelGrid,
    pub frontend: FrontendConfig,
    /// Trained frontend parameters to load, if any.
    pub checkpoint: Option<PathBuf>,
    pub bp: BpConfig,
    pub learn: LearnConfig,
    pub output: PathBuf,
    pub reduction: DepthReduction,
    pub metrics: MetricsConfig,
    pub views: Vec<ViewEntry>,
}

impl Manifest {
    pub fn new(grid: VoxelGrid) -> Self {
        Manifest {
            root: PathBuf::from("."),
            threads: 0,
            max_dimension: 640,
            grid,
            frontend: FrontendConfig::default(),
            checkpoint: None,
            bp: BpConfig::default(),
            learn: LearnConfig::default(),
            output: PathBuf::from("output"),
            reduction: DepthReduction::Expectation,
            metrics: MetricsConfig::default(),
            views: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, &root, path)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn parse(text: &str, root: &Path, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(path, format!("line {line}: {msg}"));
        let mut sections: Vec<(String, usize, Vec<(usize, String, String)>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.trim().to_ascii_lowercase(), n + 1, Vec::new()));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(n + 1, format!("expected 'key = value', found '{line}'")))?;
            let section = sections.last_mut().ok_or_else(|| err(n + 1, "key outside of any section".into()))?;
            section.2.push((n + 1, k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let mut seen = BTreeSet::new();
        for (name, line, _) in &sections {
            if name != "view" && !seen.insert(name.clone()) {
                return Err(err(*line, format!("section [{name}] appears twice")));
            }
        }
        let num = |line: usize, key: &str, v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| err(line, format!("{key}: '{v}' is not a number")))
        };
        let int = |line: usize, key: &str, v: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| err(line, format!("{key}: '{v}' is not a non-negative integer")))
        };
        let triple = |line: usize, key: &str, v: &str| -> Result<[f64; 3]> {
            let vals: Vec<f64> = v.split_whitespace().map(|x| num(line, key, x)).collect::<Result<_>>()?;
            <[f64; 3]>::try_from(vals).map_err(|_| err(line, format!("{key} needs three values")))
        };
        let flag = |line: usize, key: &str, v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(err(line, format!("{key}: '{v}' is not a boolean"))),
            }
        };
        let cfg_err = |line: usize, e: Error| err(line, e.to_string());

        let grid_section = sections
            .iter()
            .find(|s| s.0 == "grid")
            .ok_or_else(|| Error::parse(path, "missing [grid] section"))?;
        let (mut origin, mut voxel_size, mut dims) = (None, None, None);
        for (line, k, v) in &grid_section.2 {
            match k.as_str() {
                "origin" => origin = Some(triple(*line, k, v)?),
                "voxel_size" => voxel_size = Some(num(*line, k, v)?),
                "dims" => {
                    let d: Vec<usize> = v.split_whitespace().map(|x| int(*line, k, x)).collect::<Result<_>>()?;
                    let d = <[usize; 3]>::try_from(d).map_err(|_| err(*line, "dims needs three values".into()))?;
                    if d.iter().any(|&x| x < 2) {
                        return Err(err(*line, "every grid dimension must be at least 2".into()));
                    }
                    dims = Some(d);
                }
                _ => return Err(err(*line, format!("unknown key '{k}' in [grid]"))),
            }
        }
        let missing = |what: &str| Error::parse(path, format!("[grid] is missing '{what}'"));
        let grid = VoxelGrid::new(
            origin.ok_or_else(|| missing("origin"))?,
            voxel_size.ok_or_else(|| missing("voxel_size"))?,
            dims.ok_or_else(|| missing("dims"))?,
        )
        .map_err(|e| cfg_err(grid_section.1, e))?;

        let mut m = Manifest::new(grid);
        m.root = root.to_path_buf();
        for (name, header, entries) in &sections {
            match name.as_str() {
                "grid" => {}
                "dataset" => {
                    for (line, k, v) in entries {
                        match k.as_str() {
                            "threads" => m.threads = int(*line, k, v)?,
                            "max_dimension" => m.max_dimension = int(*line, k, v)?.max(1),
                            _ => return Err(err(*line, format!("unknown key '{k}' in [dataset]"))),
                        }
                    }
                }
                "frontend" => {
                    for (line, k, v) in entries {
                        let f = &mut m.frontend;
                        match k.as_str() {
                            "mode" => f.mode = v.parse().map_err(|e| cfg_err(*line, e))?,
                            "patch_size" => f.patch_size = int(*line, k, v)?,
                            "num_adjacent" => f.num_adjacent = int(*line, k, v)?,
                            "temperature" => f.temperature = num(*line, k, v)?,
                            "pairs" => f.pairs = v.parse().map_err(|e| cfg_err(*line, e))?,
                            "channels" => f.channels = int(*line, k, v)?,
                            "checkpoint" => m.checkpoint = Some(PathBuf::from(v)),
                            _ => return Err(err(*line, format!("unknown key '{k}' in [frontend]"))),
                        }
                    }
                    m.frontend.validate().map_err(|e| cfg_err(*header, e))?;
                }
                "mrf" => {
                    for (line, k, v) in entries {
                        match k.as_str() {
                            "gamma" => m.bp.unary = UnaryPotential::new(num(*line, k, v)?).map_err(|e| cfg_err(*line, e))?,
                            "iterations" => m.bp.iterations = int(*line, k, v)?,
                            "posterior" => m.bp.posterior = v.parse().map_err(|e| cfg_err(*line, e))?,
                            _ => return Err(err(*line, format!("unknown key '{k}' in [mrf]"))),
                        }
                    }
                }
                "learn" => {
                    for (line, k, v) in entries {
                        let l = &mut m.learn;
                        match k.as_str() {
                            "learning_rate" => l.learning_rate = Some(num(*line, k, v)?),
                            "steps" => l.steps = int(*line, k, v)?,
                            "stage" => l.stage = v.parse().map_err(|e: Error| err(*line, e.to_string()))?,
                            "seed" => l.seed = int(*line, k, v)? as u64,
                            "batch_size" => l.batch_size = int(*line, k, v)?,
                            "window" => l.window = int(*line, k, v)?,
                            "min_temperature" => l.min_temperature = num(*line, k, v)?,
                            "log" => l.log = Some(PathBuf::from(v)),
                            "checkpoint" => l.checkpoint = Some(PathBuf::from(v)),
                            _ => return Err(err(*line, format!("unknown key '{k}' in [learn]"))),
                        }
                    }
                }
                "output" => {
                    for (line, k, v) in entries {
                        match k.as_str() {
                            "dir" => m.output = PathBuf::from(v),
                            "reduction" => m.reduction = v.parse().map_err(|e| cfg_err(*line, e))?,
                            "per_image" => m.metrics.per_image = flag(*line, k, v)?,
                            "outlier_threshold" => m.metrics.outlier_threshold = Some(num(*line, k, v)?),
                            _ => return Err(err(*line, format!("unknown key '{k}' in [output]"))),
                        }
                    }
                }
                "view" => {
                    let (mut id, mut image, mut camera, mut depth, mut features) = (None, None, None, None, None);
                    for (line, k, v) in entries {
                        match k.as_str() {
                            "id" => id = Some(int(*line, k, v)?),
                            "image" => image = Some(PathBuf::from(v)),
                            "camera" => camera = Some(PathBuf::from(v)),
                            "depth" => depth = Some(PathBuf::from(v)),
                            "features" => features = Some(PathBuf::from(v)),
                            _ => return Err(err(*line, format!("unknown key '{k}' in [view]"))),
                        }
                    }
                    let need = |what: &str| err(*header, format!("[view] is missing '{what}'"));
                    let id = id.ok_or_else(|| need("id"))?;
                    if m.views.iter().any(|v| v.id == id) {
                        return Err(err(*header, format!("duplicate view id {id}")));
                    }
                    m.views.push(ViewEntry {
                        id,
                        image: image.ok_or_else(|| need("image"))?,
                        camera: camera.ok_or_else(|| need("camera"))?,
                        depth,
                        features,
                    });
                }
                other => return Err(err(*header, format!("unknown section [{other}]"))),
            }
        }
        if m.views.is_empty() {
            return Err(Error::parse(path, "manifest lists no [view] sections"));
        }
        Ok(m)
    }

    /// Manifest text; parsing it back yields the same manifest.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let g = &self.grid;
        let _ = writeln!(s, "[dataset]\nthreads = {}\nmax_dimension = {}\n", self.threads, self.max_dimension);
        let _ = writeln!(
            s,
            "[grid]\norigin = {:?} {:?} {:?}\nvoxel_size = {:?}\ndims = {} {} {}\n",
            g.origin[0], g.origin[1], g.origin[2], g.voxel_size, g.dims[0], g.dims[1], g.dims[2]
        );
        let f = &self.frontend;
        let _ = writeln!(
            s,
            "[frontend]\nmode = {}\npatch_size = {}\nnum_adjacent = {}\ntemperature = {:?}\npairs = {}\nchannels = {}",
            f.mode, f.patch_size, f.num_adjacent, f.temperature, f.pairs, f.channels
        );
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", c.display());
        }
        let posterior = match self.bp.posterior {
            crate::mrf::PosteriorMode::Cavity => "cavity",
            crate::mrf::PosteriorMode::Belief => "belief",
        };
        let _ = writeln!(
            s,
            "\n[mrf]\ngamma = {:?}\niterations = {}\nposterior = {posterior}\n",
            self.bp.unary.gamma, self.bp.iterations
        );
        let l = &self.learn;
        let _ = writeln!(
            s,
            "[learn]\nstage = {}\nseed = {}\nsteps = {}\nbatch_size = {}\nwindow = {}\nmin_temperature = {:?}",
            l.stage, l.seed, l.steps, l.batch_size, l.window, l.min_temperature
        );
        if let Some(r) = l.learning_rate {
            let _ = writeln!(s, "learning_rate = {r:?}");
        }
        if let Some(p) = &l.log {
            let _ = writeln!(s, "log = {}", p.display());
        }
        if let Some(p) = &l.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", p.display());
        }
        let reduction = match self.reduction {
            DepthReduction::Expectation => "expectation",
            DepthReduction::Argmax => "argmax",
        };
        let _ = writeln!(
            s,
            "\n[output]\ndir = {}\nreduction = {reduction}\nper_image = {}",
            self.output.display(),
            self.metrics.per_image
        );
        if let Some(t) = self.metrics.outlier_threshold {
            let _ = writeln!(s, "outlier_threshold = {t:?}");
        }
        for v in &self.views {
            let _ = writeln!(s, "\n[view]\nid = {}\nimage = {}\ncamera = {}", v.id, v.image.display(), v.camera.display());
            if let Some(d) = &v.depth {
                let _ = writeln!(s, "depth = {}", d.display());
            }
            if let Some(f) = &v.features {
                let _ = writeln!(s, "features = {}", f.display());
            }
        }
        s
    }
}

/// Everything a manifest points at, loaded into memory. Views are indexed
/// by position; `view_ids` maps positions back to manifest ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: VoxelGrid,
    pub view_ids: Vec<usize>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub gt_depth: Vec<Option<DepthMap>>,
    pub features: Option<Vec<FeatureMap>>,
}

impl Dataset {
    pub fn has_ground_truth(&self) -> bool {
        self.gt_depth.iter().any(Option::is_some)
    }

    /// In-memory dataset of a rendered scene with its ground truth.
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Dataset {
            grid: scene.grid.clone(),
            view_ids: (0..scene.cameras.len()).collect(),
            cameras: scene.cameras.clone(),
            images: scene.images.clone(),
            gt_depth: scene.gt_depth.iter().cloned().map(Some).collect(),
            features: None,
        }
    }
}

/// Box-downsamples a depth map, averaging the valid pixels of each block.
fn downsample_depth(map: &DepthMap, factor: usize) -> DepthMap {
    let w = (map.width / factor).max(1);
    let h = (map.height / factor).max(1);
    let mut out = DepthMap::invalid(map.view, w, h);
    for r in 0..h {
        for c in 0..w {
            let (mut acc, mut n) = (0.0, 0usize);
            for dr in 0..factor {
                for dc in 0..factor {
                    let (rr, cc) = (r * factor + dr, c * factor + dc);
                    if rr < map.height && cc < map.width {
                        if let Some(d) = map.get(rr, cc) {
                            acc += d;
                            n += 1;
                        }
                    }
                }
            }
            if n > 0 {
                out.set(r, c, acc / n as f64);
            }
        }
    }
    out
}

pub fn load_dataset(manifest: &Manifest) -> Result<Dataset> {
    let mut ds = Dataset {
        grid: manifest.grid.clone(),
        view_ids: Vec::new(),
        cameras: Vec::new(),
        images: Vec::new(),
        gt_depth: Vec::new(),
        features: None,
    };
    let mut features = Vec::new();
    for (index, v) in manifest.views.iter().enumerate() {
        let camera_path = manifest.resolve(&v.camera);
        let image_path = manifest.resolve(&v.image);
        let mut camera = io::read_camera(&camera_path, index)?;
        let mut image = io::read_pgm(&image_path)?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::parse(
                &image_path,
                format!(
                    "image is {}x{} but camera {} expects {}x{}",
                    image.width,
                    image.height,
                    camera_path.display(),
                    camera.width,
                    camera.height
                ),
            ));
        }
        let factor = image.width.max(image.height).div_ceil(manifest.max_dimension);
        let mut depth = match &v.depth {
            Some(p) => {
                let p = manifest.resolve(p);
                let d = DepthMap::from_image(index, &io::read_pfm(&p)?);
                if d.width != image.width || d.height != image.height {
                    return Err(Error::parse(&p, "depth map size differs from the image"));
                }
                Some(d)
            }
            None => None,
        };
        if factor > 1 {
            image = image.downsample(factor);
            camera = camera.downscaled(factor);
            depth = depth.map(|d| downsample_depth(&d, factor));
        }
        if let Some(p) = &v.features {
            let p = manifest.resolve(p);
            let map = FeatureMap::from_tensor(index, &io::read_tensor(&p)?).map_err(|e| Error::parse(&p, e.to_string()))?;
            if map.width != image.width || map.height != image.height {
                return Err(Error::parse(&p, "feature map size differs from the image"));
            }
            features.push(map);
        }
        ds.view_ids.push(v.id);
        ds.cameras.push(camera);
        ds.images.push(image);
        ds.gt_depth.push(depth);
    }
    if manifest.frontend.mode == crate::frontend::FrontendMode::External {
        if features.len() != manifest.views.len() {
            return Err(Error::InvalidConfig("external frontend needs a 'features' file for every view".into()));
        }
        ds.features = Some(features);
    }
    Ok(ds)
}

/// Writes images, cameras and depth maps under `dir` and a manifest
/// `dir/manifest.txt` referencing them. `base` supplies every setting
/// except the views.
pub fn write_dataset(
    dir: &Path,
    base: &Manifest,
    cameras: &[Camera],
    images: &[Image],
    depth: Option<&[DepthMap]>,
) -> Result<PathBuf> {
    for sub in ["images", "cameras", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = base.clone();
    manifest.root = dir.to_path_buf();
    manifest.views.clear();
    for (i, (cam, img)) in cameras.iter().zip(images).enumerate() {
        let image = PathBuf::from(format!("images/{i:03}.pgm"));
        let camera = PathBuf::from(format!("cameras/{i:03}.txt"));
        io::write_pgm(&dir.join(&image), img)?;
        io::write_camera(&dir.join(&camera), cam)?;
        let depth = match depth {
            Some(d) => {
                let p = PathBuf::from(format!("depth/{i:03}.pfm"));
                io::write_pfm(&dir.join(&p), &d[i].to_image())?;
                Some(p)
            }
            None => None,
        };
        manifest.views.push(ViewEntry {
            id: i,
            image,
            camera,
            depth,
            features: None,
        });
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
