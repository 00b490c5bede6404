//! Expected-depth-error training through the unrolled inference.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::DepthMap;
use crate::frontend::{
    adjacent_views, embedding_backward, score_ray_backward, score_ray_cached, FrontendConfig, FrontendGrads, FrontendMode,
    LinearEmbedding, RayScoreCache, Views,
};
use crate::geometry::{cast_ray, RayId, RayTraversal};
use crate::io::{self, Tensor};
use crate::mrf::{depth_posterior_backward, depth_posterior_from, logit, run_unrolled, sigmoid, unrolled_backward, BpTrace, FactorGraph};
use crate::pipeline::build_feature_maps;

/// `sum_i p_i |d_i - d_star|`.
pub fn expected_loss(p: &[f64], depths: &[f64], d_star: f64) -> Result<f64> {
    if !d_star.is_finite() {
        return Err(Error::InvalidGroundTruth);
    }
    Ok(p.iter().zip(depths).map(|(p, d)| p * (d - d_star).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Frontend only; the surface distribution is the depth posterior.
    Pretrain,
    /// Frontend and occupancy prior through the unrolled BP.
    EndToEnd,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::EndToEnd => "end2end",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "end2end" => Ok(Stage::EndToEnd),
            other => Err(Error::InvalidConfig(format!("unknown stage '{other}' (expected pretrain or end2end)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub stage: Stage,
    /// Defaults to 1e-3 for pretraining and 1e-4 end to end.
    pub learning_rate: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub window: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// The temperature is projected back above this after every step.
    pub min_temperature: f64,
    pub iterations: usize,
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            stage: Stage::EndToEnd,
            learning_rate: None,
            steps: 1000,
            batch_size: 2000,
            window: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            min_temperature: 1e-3,
            iterations: 3,
            log: None,
            checkpoint: None,
        }
    }
}

impl LearnConfig {
    pub fn rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Pretrain => 1e-3,
            Stage::EndToEnd => 1e-4,
        })
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Trainable parameters: embedding weights (linear frontend only), softmax
/// temperature and the log-odds of the occupancy prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableParams {
    pub embedding: Option<LinearEmbedding>,
    pub temperature: f64,
    pub logit_gamma: f64,
}

impl LearnableParams {
    /// Values are rounded to single precision so checkpoints are exact.
    pub fn new(embedding: Option<LinearEmbedding>, temperature: f64, gamma: f64) -> Self {
        let mut p = LearnableParams {
            embedding,
            temperature,
            logit_gamma: logit(gamma),
        };
        let v = p.to_vec();
        p.set_from(&v.iter().map(|&x| round_f32(x)).collect::<Vec<_>>());
        p
    }

    pub fn gamma(&self) -> f64 {
        sigmoid(self.logit_gamma)
    }

    pub fn len(&self) -> usize {
        self.embedding.as_ref().map_or(0, |e| e.weights.len()) + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[W..., tau, logit(gamma)]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.embedding.as_ref().map_or_else(Vec::new, |e| e.weights.clone());
        v.push(self.temperature);
        v.push(self.logit_gamma);
        v
    }

    pub fn set_from(&mut self, v: &[f64]) {
        let n = v.len() - 2;
        if let Some(e) = &mut self.embedding {
            e.weights.copy_from_slice(&v[..n]);
        }
        self.temperature = v[n];
        self.logit_gamma = v[n + 1];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Option<Vec<f64>>,
    pub temperature: f64,
    pub logit_gamma: f64,
}

impl Gradients {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.embedding.clone().unwrap_or_default();
        v.push(self.temperature);
        v.push(self.logit_gamma);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|g| g.is_finite())
    }
}

/// Ground-truth rays drawn from a window of consecutive views.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<(RayId, f64)>,
    /// Positions in the list of views that carry ground truth.
    pub window: Range<usize>,
}

/// Uniform window start, then uniformly chosen valid rays inside the window
/// (all of them when there are fewer than `batch_size`).
pub fn sample_batch(gt: &[Option<DepthMap>], seed: u64, batch_size: usize, window: usize) -> Result<RayBatch> {
    let with_gt: Vec<usize> = (0..gt.len())
        .filter(|&v| gt[v].as_ref().is_some_and(|d| d.valid_count() > 0))
        .collect();
    if window == 0 || with_gt.len() < window {
        return Err(Error::InsufficientGroundTruth(format!(
            "{} views have ground truth, the window needs {window}",
            with_gt.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=with_gt.len() - window);
    let mut candidates = Vec::new();
    for &v in &with_gt[start..start + window] {
        let d = gt[v].as_ref().expect("filtered");
        for row in 0..d.height {
            for col in 0..d.width {
                if let Some(depth) = d.get(row, col) {
                    candidates.push((RayId { view: v, row, col }, depth));
                }
            }
        }
    }
    let rays = if candidates.len() <= batch_size {
        candidates
    } else {
        let mut idx = sample(&mut rng, candidates.len(), batch_size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i]).collect()
    };
    Ok(RayBatch {
        rays,
        window: start..start + window,
    })
}

/// Unrolled BP over a set of rays with the expected loss on top.
#[derive(Debug, Clone)]
pub struct MrfTape {
    graph: FactorGraph,
    trace: BpTrace,
    pub posteriors: Vec<Vec<f64>>,
}

pub fn mrf_forward(num_voxels: usize, traversals: &[RayTraversal], s: &[Vec<f64>], logit_gamma: f64, iterations: usize) -> MrfTape {
    let refs: Vec<&RayTraversal> = traversals.iter().collect();
    let graph = FactorGraph::new(num_voxels, &refs);
    let s_refs: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
    let trace = run_unrolled(&graph, &s_refs, logit_gamma, iterations, true);
    let cavity = trace.cavity.last().expect("final sweep");
    let posteriors = (0..traversals.len())
        .map(|k| depth_posterior_from(&s[k], &cavity[graph.range(k)]))
        .collect();
    MrfTape { graph, trace, posteriors }
}

/// Gradients on every ray's `s` and on `logit(gamma)` given `dL/dp`.
pub fn mrf_backward(tape: &MrfTape, s: &[Vec<f64>], d_posteriors: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let cavity = tape.trace.cavity.last().ok_or(Error::MissingForwardCache)?;
    if s.len() != tape.graph.num_factors() || d_posteriors.len() != s.len() {
        return Err(Error::TapeMismatch("ray count differs from the recorded graph".into()));
    }
    let mut ds: Vec<Vec<f64>> = s.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut d_final = vec![0.0; tape.graph.num_incidences()];
    for k in 0..s.len() {
        let r = tape.graph.range(k);
        depth_posterior_backward(&s[k], &cavity[r.clone()], &d_posteriors[k], &mut ds[k], &mut d_final[r]);
    }
    let s_refs: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
    let (ds_bp, d_gamma) = unrolled_backward(&tape.graph, &s_refs, &tape.trace, &d_final)?;
    for (a, b) in ds.iter_mut().zip(ds_bp) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
    Ok((ds, d_gamma))
}

/// Everything the reverse pass needs, recorded by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub stage: Stage,
    /// Distinct rays in id order.
    pub rays: Vec<RayId>,
    pub multiplicity: Vec<usize>,
    pub d_star: Vec<f64>,
    pub traversals: Vec<RayTraversal>,
    pub s: Vec<Vec<f64>>,
    scores: Vec<RayScoreCache>,
    mrf: Option<MrfTape>,
    pub posteriors: Vec<Vec<f64>>,
    pub risk: f64,
    params: LearnableParams,
}

impl GradientTape {
    /// Risk recomputed from the recorded posteriors.
    pub fn replay(&self) -> f64 {
        risk_of(&self.posteriors, &self.traversals, &self.d_star, &self.multiplicity)
    }
}

fn risk_of(posteriors: &[Vec<f64>], traversals: &[RayTraversal], d_star: &[f64], multiplicity: &[usize]) -> f64 {
    posteriors
        .iter()
        .zip(traversals)
        .zip(d_star.iter().zip(multiplicity))
        .map(|((p, t), (&d, &m))| m as f64 * expected_loss(p, &t.depths, d).unwrap_or(0.0))
        .sum()
}

/// A dataset plus the fixed parts of the model.
pub struct Model<'a> {
    pub data: &'a Dataset,
    pub frontend: FrontendConfig,
    pub iterations: usize,
    adjacency: Vec<Vec<usize>>,
}

impl<'a> Model<'a> {
    pub fn new(data: &'a Dataset, frontend: FrontendConfig, iterations: usize) -> Self {
        let adjacency = adjacent_views(&data.cameras, frontend.num_adjacent);
        Model {
            data,
            frontend,
            iterations,
            adjacency,
        }
    }

    fn config(&self, params: &LearnableParams) -> FrontendConfig {
        FrontendConfig {
            temperature: params.temperature,
            ..self.frontend.clone()
        }
    }

    pub fn forward(&self, batch: &RayBatch, params: &LearnableParams, stage: Stage) -> Result<GradientTape> {
        if self.frontend.mode == FrontendMode::Linear && params.embedding.is_none() {
            return Err(Error::InvalidConfig("linear frontend needs embedding parameters".into()));
        }
        let mut unique: BTreeMap<RayId, (f64, usize)> = BTreeMap::new();
        for &(id, d) in &batch.rays {
            if d.is_finite() {
                unique.entry(id).or_insert((d, 0)).1 += 1;
            }
        }
        let cameras = &self.data.cameras;
        let cast: Vec<Option<(RayId, f64, usize, RayTraversal)>> = unique
            .par_iter()
            .map(|(&id, &(d, m))| {
                let cam = cameras.get(id.view)?;
                cast_ray(cam, id.row, id.col, &self.data.grid).ok().map(|t| (id, d, m, t))
            })
            .collect();
        let cast: Vec<_> = cast.into_iter().flatten().collect();
        let mut needed = vec![false; cameras.len()];
        for (id, ..) in &cast {
            needed[id.view] = true;
            for &a in &self.adjacency[id.view] {
                needed[a] = true;
            }
        }
        let config = self.config(params);
        let maps = build_feature_maps(self.data, &config, params.embedding.as_ref(), Some(&needed))?;
        let views = Views {
            cameras,
            maps: &maps,
            adjacency: &self.adjacency,
        };
        let scored: Vec<(Vec<f64>, RayScoreCache)> = cast
            .par_iter()
            .map(|(_, _, _, t)| {
                let (dist, cache) = score_ray_cached(t, &views, &self.data.grid, &config);
                (dist.s, cache)
            })
            .collect();
        let rays: Vec<RayId> = cast.iter().map(|c| c.0).collect();
        let d_star: Vec<f64> = cast.iter().map(|c| c.1).collect();
        let multiplicity: Vec<usize> = cast.iter().map(|c| c.2).collect();
        let traversals: Vec<RayTraversal> = cast.into_iter().map(|c| c.3).collect();
        let (s, scores): (Vec<Vec<f64>>, Vec<RayScoreCache>) = scored.into_iter().unzip();
        let (mrf, posteriors) = match stage {
            Stage::Pretrain => (None, s.clone()),
            Stage::EndToEnd => {
                let tape = mrf_forward(self.data.grid.len(), &traversals, &s, params.logit_gamma, self.iterations);
                let p = tape.posteriors.clone();
                (Some(tape), p)
            }
        };
        let risk = risk_of(&posteriors, &traversals, &d_star, &multiplicity);
        Ok(GradientTape {
            stage,
            rays,
            multiplicity,
            d_star,
            traversals,
            s,
            scores,
            mrf,
            posteriors,
            risk,
            params: params.clone(),
        })
    }

    pub fn backward(&self, tape: &GradientTape, params: &LearnableParams) -> Result<Gradients> {
        if &tape.params != params {
            return Err(Error::TapeMismatch("tape was recorded with different parameters".into()));
        }
        let dp: Vec<Vec<f64>> = tape
            .traversals
            .iter()
            .zip(tape.d_star.iter().zip(&tape.multiplicity))
            .map(|(t, (&d, &m))| t.depths.iter().map(|x| m as f64 * (x - d).abs()).collect())
            .collect();
        let (ds, logit_gamma) = match (&tape.stage, &tape.mrf) {
            (Stage::Pretrain, _) => (dp, 0.0),
            (Stage::EndToEnd, Some(m)) => mrf_backward(m, &tape.s, &dp)?,
            (Stage::EndToEnd, None) => return Err(Error::MissingForwardCache),
        };
        let config = self.config(params);
        if config.mode == FrontendMode::Sad {
            return Ok(Gradients {
                embedding: params.embedding.as_ref().map(|e| vec![0.0; e.weights.len()]),
                temperature: 0.0,
                logit_gamma,
            });
        }
        let per_ray: Vec<FrontendGrads> = tape
            .scores
            .par_iter()
            .zip(&ds)
            .map(|(cache, g)| {
                let mut grads = FrontendGrads::default();
                score_ray_backward(cache, g, &config, &mut grads).map(|_| grads)
            })
            .collect::<Result<_>>()?;
        let mut grads = FrontendGrads::default();
        for g in per_ray {
            grads.merge(g);
        }
        let embedding = params
            .embedding
            .as_ref()
            .map(|e| embedding_backward(&grads, &self.data.images, &config, e));
        Ok(Gradients {
            embedding,
            temperature: grads.temperature,
            logit_gamma,
        })
    }

    pub fn batch_risk_and_gradients(&self, batch: &RayBatch, params: &LearnableParams, stage: Stage) -> Result<(f64, Gradients, GradientTape)> {
        let tape = self.forward(batch, params, stage)?;
        let grads = self.backward(&tape, params)?;
        Ok((tape.risk, grads, tape))
    }
}

/// Adam with the moment estimates rounded to single precision after every
/// step so that checkpoints restore the exact optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, config: &LearnConfig) -> Self {
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = round_f32(self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i]);
            self.v[i] = round_f32(self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i]);
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
            params[i] = round_f32(params[i] - update);
        }
    }
}

/// Parameters, optimizer state and completed step count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: LearnableParams,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: LearnableParams, config: &LearnConfig) -> Self {
        let adam = Adam::new(params.len(), config);
        TrainState { params, adam, step: 0 }
    }

    fn tensors(&self) -> Result<Vec<Tensor>> {
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let w = match &self.params.embedding {
            Some(e) => Tensor::new(vec![e.channels, e.input_dim], to32(&e.weights))?,
            None => Tensor::new(vec![0], Vec::new())?,
        };
        let n = self.adam.m.len();
        Ok(vec![
            w,
            Tensor::scalar(self.params.temperature as f32),
            Tensor::scalar(self.params.logit_gamma as f32),
            Tensor::new(vec![n], to32(&self.adam.m))?,
            Tensor::new(vec![n], to32(&self.adam.v))?,
            Tensor::new(vec![2], vec![self.step as f32, self.adam.t as f32])?,
        ])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_tensors(path, &self.tensors()?)
    }

    pub fn load(path: &Path, config: &LearnConfig) -> Result<Self> {
        let t = io::read_tensors(path)?;
        let bad = |m: &str| Error::parse(path, m.to_string());
        if t.len() != 6 {
            return Err(bad("checkpoint needs six tensors"));
        }
        let to64 = |x: &Tensor| x.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let embedding = match t[0].dims.as_slice() {
            [0] => None,
            [c, d] => Some(LinearEmbedding {
                channels: *c,
                input_dim: *d,
                weights: to64(&t[0]),
            }),
            _ => return Err(bad("embedding tensor must be 2-d")),
        };
        let scalar = |x: &Tensor| x.data.first().copied().map(f64::from).ok_or_else(|| bad("empty scalar"));
        let params = LearnableParams {
            embedding,
            temperature: scalar(&t[1])?,
            logit_gamma: scalar(&t[2])?,
        };
        if t[3].data.len() != params.len() || t[4].data.len() != params.len() || t[5].data.len() != 2 {
            return Err(bad("optimizer state does not match the parameters"));
        }
        let mut adam = Adam::new(params.len(), config);
        adam.m = to64(&t[3]);
        adam.v = to64(&t[4]);
        adam.t = t[5].data[1] as u64;
        Ok(TrainState {
            params,
            adam,
            step: t[5].data[0] as usize,
        })
    }
}

/// Per-step batch seed.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add(step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub risk: f64,
    pub gamma: f64,
    pub grad_norm: f64,
}

fn append_log(path: &Path, records: &[StepRecord], header: bool) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if header {
        out.push_str("step,risk,gamma,grad_norm\n");
    }
    for r in records {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.risk, r.gamma, r.grad_norm));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs Adam from `state.step` up to `config.steps`. On a non-finite risk
/// or gradient the last good state is checkpointed and an error returned.
pub fn train(model: &Model, config: &LearnConfig, mut state: TrainState) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut records = Vec::new();
    if let Some(log) = &config.log {
        if state.step == 0 {
            let _ = fs::remove_file(log);
            append_log(log, &[], true)?;
        }
    }
    let lr = config.rate();
    while state.step < config.steps {
        let batch = sample_batch(&model.data.gt_depth, step_seed(config.seed, state.step), config.batch_size, config.window)?;
        let outcome = model.batch_risk_and_gradients(&batch, &state.params, config.stage);
        let (risk, grads) = match outcome {
            Ok((r, g, _)) if r.is_finite() && g.is_finite() => (r, g),
            Ok(_) | Err(Error::DivergenceDetected { .. }) => {
                if let Some(p) = &config.checkpoint {
                    state.save(p)?;
                }
                return Err(Error::DivergenceDetected { step: state.step });
            }
            Err(e) => return Err(e),
        };
        let mut v = state.params.to_vec();
        state.adam.step(&mut v, &grads.to_vec(), lr);
        let n = v.len();
        v[n - 2] = v[n - 2].max(round_f32(config.min_temperature));
        state.params.set_from(&v);
        let record = StepRecord {
            step: state.step,
            risk,
            gamma: state.params.gamma(),
            grad_norm: grads.norm(),
        };
        if let Some(log) = &config.log {
            append_log(log, std::slice::from_ref(&record), false)?;
        }
        records.push(record);
        state.step += 1;
    }
    if let Some(p) = &config.checkpoint {
        state.save(p)?;
    }
    Ok((state, records))
}

/// Largest analytic-vs-numeric discrepancy of one parameter group, relative
/// to the group's largest gradient magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: &'static str,
    pub max_relative_error: f64,
    pub entries: usize,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub rays: usize,
    pub max_voxels_per_ray: usize,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_relative_error < GRADCHECK_TOLERANCE)
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, mut f: F) -> Result<f64> {
    Ok((f(x + GRADCHECK_STEP)? - f(x - GRADCHECK_STEP)?) / (2.0 * GRADCHECK_STEP))
}

/// Finite-difference check of every trainable group on a random 4x4x4
/// scene with a linear frontend.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(seed, |_| {})
}

/// As [`gradcheck`], with `tamper` applied to the analytic gradients before
/// comparison.
pub fn gradcheck_with(seed: u64, tamper: impl Fn(&mut Gradients)) -> Result<GradcheckReport> {
    use crate::synth::{generate_scene_with, SceneConfig};
    let mut scene_cfg = SceneConfig::new([4, 4, 4], 4);
    scene_cfg.noise_sigma = 0.02;
    scene_cfg.image_size = 12;
    let scene = generate_scene_with(seed, &scene_cfg)?;
    let data = Dataset::from_scene(&scene);
    let frontend = FrontendConfig {
        mode: FrontendMode::Linear,
        patch_size: 3,
        num_adjacent: 2,
        temperature: 0.3,
        channels: 3,
        ..FrontendConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let embedding = LinearEmbedding::random(frontend.channels, frontend.patch_dim(), &mut rng);
    let params = LearnableParams::new(Some(embedding), rng.random_range(0.2..0.6), rng.random_range(0.1..0.5));
    let batch = sample_batch(&data.gt_depth, seed, 40, 2)?;
    let model = Model::new(&data, frontend, 3);
    let (_, mut grads, tape) = model.batch_risk_and_gradients(&batch, &params, Stage::EndToEnd)?;
    tamper(&mut grads);

    let risk_at = |v: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.set_from(v);
        Ok(model.forward(&batch, &p, Stage::EndToEnd)?.risk)
    };
    let base = params.to_vec();
    let n = base.len();
    let numeric: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut v = base.clone();
            central(base[i], |x| {
                v[i] = x;
                risk_at(&v)
            })
        })
        .collect::<Result<_>>()?;
    let analytic = grads.to_vec();

    let mrf = tape.mrf.as_ref().ok_or(Error::MissingForwardCache)?;
    let dp: Vec<Vec<f64>> = tape
        .traversals
        .iter()
        .zip(tape.d_star.iter().zip(&tape.multiplicity))
        .map(|(t, (&d, &m))| t.depths.iter().map(|x| m as f64 * (x - d).abs()).collect())
        .collect();
    let (ds, _) = mrf_backward(mrf, &tape.s, &dp)?;
    let mrf_risk = |s: &[Vec<f64>]| {
        let m = mrf_forward(data.grid.len(), &tape.traversals, s, params.logit_gamma, model.iterations);
        risk_of(&m.posteriors, &tape.traversals, &tape.d_star, &tape.multiplicity)
    };
    let coords: Vec<(usize, usize)> = tape.s.iter().enumerate().flat_map(|(k, s)| (0..s.len()).map(move |i| (k, i))).collect();
    let ds_numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(k, i)| {
            let mut s = tape.s.clone();
            central(tape.s[k][i], |x| {
                s[k][i] = x;
                Ok(mrf_risk(&s))
            })
        })
        .collect::<Result<_>>()?;
    let ds_analytic: Vec<f64> = coords.iter().map(|&(k, i)| ds[k][i]).collect();

    let group = |name, a: &[f64], b: &[f64]| GroupError {
        group: name,
        max_relative_error: relative_error(a, b),
        entries: a.len(),
    };
    Ok(GradcheckReport {
        seed,
        rays: tape.rays.len(),
        max_voxels_per_ray: tape.traversals.iter().map(|t| t.voxels.len()).max().unwrap_or(0),
        groups: vec![
            group("W", &analytic[..n - 2], &numeric[..n - 2]),
            group("tau", &analytic[n - 2..n - 1], &numeric[n - 2..n - 1]),
            group("gamma", &analytic[n - 1..], &numeric[n - 1..]),
            group("s", &ds_analytic, &ds_numeric),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(expected_loss(&[1.0, 0.0], &[2.0, 3.0], 2.0).unwrap(), 0.0);
        let l = expected_loss(&[1.0 / 3.0; 3], &[1.0, 2.0, 3.0], 2.0).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(expected_loss(&[1.0], &[1.0], f64::NAN), Err(Error::InvalidGroundTruth)));
    }

    #[test]
    fn adam_with_zero_rate_keeps_parameters() {
        let cfg = LearnConfig::default();
        let mut adam = Adam::new(3, &cfg);
        let mut p = vec![round_f32(0.1), round_f32(-2.0), round_f32(3.3)];
        let before = p.clone();
        for _ in 0..10 {
            adam.step(&mut p, &[1.0, -0.5, 0.25], 0.0);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let cfg = LearnConfig::default();
        let mut adam = Adam::new(2, &cfg);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.01], 0.125);
        assert!((p[0] + 0.125).abs() < 1e-6);
        assert!((p[1] - 0.125).abs() < 1e-4);
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("pretrain".parse::<Stage>().unwrap(), Stage::Pretrain);
        assert_eq!("end2end".parse::<Stage>().unwrap(), Stage::EndToEnd);
        assert!("finetune".parse::<Stage>().is_err());
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0, 1e-9], &[2.0, 0.0]) - 5e-10).abs() < 1e-20);
    }
}
