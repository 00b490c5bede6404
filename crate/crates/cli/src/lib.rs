//! Command-line front end: dataset ingestion, reconstruction, training,
//! evaluation, synthetic data and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayfuse_core::dataset::{load_dataset, write_dataset, Dataset, Manifest};
use rayfuse_core::eval::{metrics, DepthMap, DepthReduction, MetricsReport};
use rayfuse_core::frontend::{FrontendMode, LinearEmbedding};
use rayfuse_core::learn::{gradcheck, train, GradcheckReport, LearnableParams, Model, Stage, StepRecord, TrainState};
use rayfuse_core::pipeline::{read_predicted_depths, reconstruct, write_reconstruction, PipelineOptions, Reconstruction};
use rayfuse_core::synth::{generate_scene_with, SceneConfig};
use rayfuse_core::{Error, VoxelGrid};
use thiserror::Error as ThisError;

#[derive(Debug, Parser)]
#[command(name = "rayfuse", version, about = "Ray-potential MRF multi-view reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Depth maps, occupancy beliefs and a point cloud for every view.
    Reconstruct {
        manifest: PathBuf,
        /// Use each ray's surface distribution directly, without BP.
        #[arg(long)]
        frontend_only: bool,
        /// Overrides the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fits the frontend temperature, embedding and occupancy prior.
    Train {
        manifest: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from the manifest's training checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Scores predicted depth maps against the manifest's ground truth.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Writes a seeded synthetic scene as a dataset directory.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 12)]
        cameras: usize,
    },
    /// Compares analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(Error),
    #[error("{0}")]
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DivergenceDetected { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Data(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn gt_maps(data: &Dataset) -> Vec<DepthMap> {
    data.gt_depth
        .iter()
        .zip(&data.cameras)
        .enumerate()
        .map(|(v, (d, c))| d.clone().unwrap_or_else(|| DepthMap::invalid(v, c.width, c.height)))
        .collect()
}

fn write_json(path: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Numerical(format!("cannot encode metrics: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

/// Loads trained parameters: embedding, temperature and prior.
fn load_parameters(manifest: &Manifest) -> Result<Option<LearnableParams>, CliError> {
    match &manifest.checkpoint {
        Some(p) => Ok(Some(TrainState::load(&manifest.resolve(p), &manifest.learn)?.params)),
        None => Ok(None),
    }
}

pub fn pipeline_options(manifest: &Manifest, frontend_only: bool) -> Result<PipelineOptions, CliError> {
    let mut frontend = manifest.frontend.clone();
    let mut bp = manifest.bp.clone();
    let mut embedding = None;
    if let Some(params) = load_parameters(manifest)? {
        frontend.temperature = params.temperature;
        bp.unary.gamma = params.gamma();
        embedding = params.embedding;
    }
    if frontend.mode == FrontendMode::Linear && embedding.is_none() {
        return Err(CliError::Usage("the linear frontend needs a [frontend] checkpoint".into()));
    }
    Ok(PipelineOptions {
        frontend,
        bp,
        reduction: manifest.reduction,
        embedding,
        frontend_only,
    })
}

#[derive(Debug)]
pub struct ReconstructOutcome {
    pub output: PathBuf,
    pub reconstruction: Reconstruction,
    pub metrics: Option<MetricsReport>,
}

pub fn run_reconstruct(manifest_path: &Path, frontend_only: bool, out: Option<&Path>) -> Result<ReconstructOutcome, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    let output = out.map_or_else(|| manifest.output_dir(), Path::to_path_buf);
    in_pool(manifest.threads, || -> Result<ReconstructOutcome, CliError> {
        let clock = std::time::Instant::now();
        let data = load_dataset(&manifest)?;
        let load = clock.elapsed();
        let options = pipeline_options(&manifest, frontend_only)?;
        let mut recon = reconstruct(&data, &options)?;
        recon.timings.insert(0, ("load", load));
        let clock = std::time::Instant::now();
        write_reconstruction(&output, &data, &recon)?;
        let mut report = None;
        if data.has_ground_truth() {
            let m = metrics(&recon.depth, &gt_maps(&data), &data.cameras, &manifest.metrics)?;
            write_json(&output.join("metrics.json"), &m)?;
            report = Some(m);
        }
        recon.timings.push(("write", clock.elapsed()));
        Ok(ReconstructOutcome {
            output,
            reconstruction: recon,
            metrics: report,
        })
    })?
}

pub fn run_evaluate(manifest_path: &Path, pred: &Path) -> Result<MetricsReport, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    in_pool(manifest.threads, || -> Result<MetricsReport, CliError> {
        let data = load_dataset(&manifest)?;
        if !data.has_ground_truth() {
            return Err(Error::InsufficientGroundTruth("the manifest lists no depth files".into()).into());
        }
        let predicted = read_predicted_depths(pred, &data)?;
        Ok(metrics(&predicted, &gt_maps(&data), &data.cameras, &manifest.metrics)?)
    })?
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn run_train(manifest_path: &Path, stage: Stage, seed: u64, resume: bool) -> Result<TrainOutcome, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    let out = manifest.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut config = manifest.learn.clone();
    config.stage = stage;
    config.seed = seed;
    config.iterations = manifest.bp.iterations;
    let checkpoint = config.checkpoint.as_ref().map_or_else(|| out.join("checkpoint.rnt"), |p| manifest.resolve(p));
    let log = config.log.as_ref().map_or_else(|| out.join("train.csv"), |p| manifest.resolve(p));
    config.checkpoint = Some(checkpoint.clone());
    config.log = Some(log.clone());
    in_pool(manifest.threads, || -> Result<TrainOutcome, CliError> {
        let data = load_dataset(&manifest)?;
        let state = if resume {
            TrainState::load(&checkpoint, &config)?
        } else {
            let params = match load_parameters(&manifest)? {
                Some(p) => p,
                None => {
                    let embedding = (manifest.frontend.mode == FrontendMode::Linear).then(|| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        LinearEmbedding::random(manifest.frontend.channels, manifest.frontend.patch_dim(), &mut rng)
                    });
                    LearnableParams::new(embedding, manifest.frontend.temperature, manifest.bp.unary.gamma)
                }
            };
            TrainState::new(params, &config)
        };
        let model = Model::new(&data, manifest.frontend.clone(), config.iterations);
        let (state, records) = train(&model, &config, state)?;
        Ok(TrainOutcome {
            state,
            records,
            checkpoint: checkpoint.clone(),
            log: log.clone(),
        })
    })?
}

/// Capture setup of `synth`: a floor under the primitives, seen from a
/// 120 degree arc looking down at it.
pub fn synth_config(size: usize, cameras: usize) -> SceneConfig {
    let mut cfg = SceneConfig::new([size; 3], cameras);
    cfg.floor = Some(true);
    cfg.image_size = 3 * size;
    cfg.focal = 2.5 * cfg.image_size as f64;
    cfg.elevation = [45.0, 60.0];
    cfg.arc = 120.0;
    cfg.target_height = 0.06;
    cfg
}

/// Writes the scene and returns the manifest path. The grid spans the unit
/// cube at `size` voxels per side.
pub fn run_synth(seed: u64, out: &Path, size: usize, cameras: usize) -> Result<PathBuf, CliError> {
    if size < 2 {
        return Err(CliError::Usage("--size must be at least 2".into()));
    }
    let scene = generate_scene_with(seed, &synth_config(size, cameras))?;
    let grid: VoxelGrid = scene.grid.clone();
    let mut base = Manifest::new(grid);
    base.frontend.patch_size = 5;
    base.frontend.num_adjacent = cameras.saturating_sub(1).min(4);
    base.frontend.temperature = 0.02;
    base.reduction = DepthReduction::Argmax;
    base.learn.window = base.learn.window.min(cameras);
    Ok(write_dataset(out, &base, &scene.cameras, &scene.images, Some(&scene.gt_depth))?)
}

pub fn run_gradcheck(seed: u64, count: u64) -> Result<Vec<GradcheckReport>, CliError> {
    (seed..seed + count.max(1)).map(|s| gradcheck(s).map_err(CliError::from)).collect()
}

fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Reconstruct {
            manifest,
            frontend_only,
            out,
        } => {
            let o = run_reconstruct(&manifest, frontend_only, out.as_deref())?;
            for (stage, t) in &o.reconstruction.timings {
                println!("{stage:<10} {:>9.3} s", seconds(*t));
            }
            if let Some(m) = &o.metrics {
                println!(
                    "accuracy {:.6}  completeness {:.6}  chamfer {:.6}  depth error {:.6}",
                    m.accuracy_mean, m.completeness_mean, m.chamfer, m.depth_error_mean
                );
            }
            println!("wrote {}", o.output.display());
        }
        Command::Train {
            manifest,
            stage,
            seed,
            resume,
        } => {
            let o = run_train(&manifest, stage, seed, resume)?;
            if let (Some(first), Some(last)) = (o.records.first(), o.records.last()) {
                println!("risk {:.6} -> {:.6} over {} steps", first.risk, last.risk, o.records.len());
            }
            println!("gamma {:.6}  temperature {:.6}", o.state.params.gamma(), o.state.params.temperature);
            println!("checkpoint {}", o.checkpoint.display());
            println!("log {}", o.log.display());
        }
        Command::Evaluate { manifest, pred } => {
            let m = run_evaluate(&manifest, &pred)?;
            let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Numerical(e.to_string()))?;
            println!("{text}");
            write_json(&pred.join("metrics.json"), &m)?;
        }
        Command::Synth { seed, out, size, cameras } => {
            let path = run_synth(seed, &out, size, cameras)?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { seed, count } => {
            let reports = run_gradcheck(seed, count)?;
            let mut failed = false;
            for r in &reports {
                println!("seed {} ({} rays, up to {} voxels per ray)", r.seed, r.rays, r.max_voxels_per_ray);
                for g in &r.groups {
                    let ok = g.max_relative_error < rayfuse_core::learn::GRADCHECK_TOLERANCE;
                    failed |= !ok;
                    println!(
                        "  {:<6} {:>4} entries  max relative error {:.3e}  {}",
                        g.group,
                        g.entries,
                        g.max_relative_error,
                        if ok { "ok" } else { "FAIL" }
                    );
                }
            }
            if failed {
                return Err(CliError::Numerical("gradient check exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}
