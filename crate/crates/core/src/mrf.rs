//! Occupancy MRF with Bernoulli unaries and first-occupied-voxel ray
//! potentials, solved with synchronous loopy sum-product belief propagation.
//!
//! Binary messages are kept as log-odds. A variable-to-factor message is the
//! voxel's prior log-odds plus every other incident factor message; a
//! factor-to-variable message is computed for all voxels on a ray in two
//! linear passes over the ray (see [`factor_to_variable`]).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RayId, RayTraversal};

/// Every stored occupancy probability lives in `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

/// Normalizers below this make a depth posterior fall back to uniform.
const DEGENERATE_NORMALIZER: f64 = 1e-300;

fn logit_bound() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Clamps log-odds to the probability band; the flag reports saturation.
fn clamp_logit(x: f64) -> (f64, bool) {
    let b = logit_bound();
    if x.is_nan() {
        (0.0, true)
    } else if x > b {
        (b, true)
    } else if x < -b {
        (-b, true)
    } else {
        (x, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnaryPotential {
    pub gamma: f64,
}

impl UnaryPotential {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("occupancy prior {gamma} not in (0, 1)")));
        }
        Ok(UnaryPotential { gamma })
    }

    pub fn value(&self, occupied: bool) -> f64 {
        if occupied {
            self.gamma
        } else {
            1.0 - self.gamma
        }
    }
}

impl Default for UnaryPotential {
    fn default() -> Self {
        UnaryPotential { gamma: 0.05 }
    }
}

/// A ray potential: the traversal plus the frontend's surface distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RayFactor {
    pub traversal: RayTraversal,
    pub s: Vec<f64>,
}

impl RayFactor {
    pub fn new(traversal: RayTraversal, s: Vec<f64>) -> Result<Self> {
        if traversal.len() != s.len() {
            return Err(Error::ShapeMismatch(format!(
                "ray has {} voxels but {} surface probabilities",
                traversal.len(),
                s.len()
            )));
        }
        Ok(RayFactor { traversal, s })
    }

    pub fn ray_id(&self) -> RayId {
        self.traversal.ray_id
    }

    /// Potential value for an explicit occupancy assignment along the ray.
    pub fn potential(&self, occupancy: impl Fn(usize) -> bool) -> f64 {
        for (i, &v) in self.traversal.voxels.iter().enumerate() {
            if occupancy(v) {
                return self.s[i];
            }
        }
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMode {
    /// `p_i ∝ s_i q_i prod_{j<i} (1 - q_j)` with cavity occupancies `q`.
    Cavity,
    /// `p_i ∝ b_i prod_{j<i} (1 - b_j)` with voxel beliefs `b`.
    Belief,
}

impl std::str::FromStr for PosteriorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cavity" => Ok(PosteriorMode::Cavity),
            "belief" => Ok(PosteriorMode::Belief),
            other => Err(Error::InvalidConfig(format!("unknown posterior mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    pub unary: UnaryPotential,
    pub iterations: usize,
    pub posterior: PosteriorMode,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            unary: UnaryPotential::default(),
            iterations: 3,
            posterior: PosteriorMode::Cavity,
        }
    }
}

/// Cavity occupancy of a voxel towards one factor: prior times all other
/// incoming factor messages, normalized. `incoming` holds `mu_{r'->i}(1)`.
pub fn variable_to_factor(gamma: f64, incoming: &[f64], exclude: usize) -> f64 {
    let x = logit(gamma)
        + incoming
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != exclude)
            .map(|(_, &m)| logit(m))
            .sum::<f64>();
    sigmoid(clamp_logit(x).0)
}

/// Forward quantities of one ray's factor-to-variable pass.
///
/// `prefix_sum`/`prefix_prod` are the running sum `A_i = sum_{k<i} s_k q_k P_k`
/// and product `P_i = prod_{j<i} (1 - q_j)`, jointly rescaled to sum to one
/// at every step (messages only depend on their ratio). `suffix` is
/// `B_i = sum_{k>i} s_k q_k prod_{i<j<k} (1 - q_j)`.
#[derive(Debug, Clone, Default)]
pub struct FactorCache {
    prefix_sum: Vec<f64>,
    prefix_prod: Vec<f64>,
    suffix: Vec<f64>,
    occupied: Vec<f64>,
    empty: Vec<f64>,
    saturated: Vec<bool>,
}

/// Log-odds of every factor-to-variable message of a ray in `O(N)`.
///
/// For voxel `i`, summing the potential over the other voxels weighted by
/// their cavity occupancies gives
/// `mu(1) ∝ A_i + s_i P_i` and `mu(0) ∝ A_i + P_i B_i`.
pub fn factor_to_variable_logits(s: &[f64], q: &[f64]) -> (Vec<f64>, FactorCache) {
    let n = s.len();
    let mut cache = FactorCache {
        prefix_sum: Vec::with_capacity(n),
        prefix_prod: Vec::with_capacity(n),
        suffix: vec![0.0; n],
        occupied: Vec::with_capacity(n),
        empty: Vec::with_capacity(n),
        saturated: Vec::with_capacity(n),
    };
    let (mut a, mut p) = (0.0f64, 1.0f64);
    for i in 0..n {
        cache.prefix_sum.push(a);
        cache.prefix_prod.push(p);
        let u = a + s[i] * q[i] * p;
        let w = p * (1.0 - q[i]);
        let z = u + w;
        a = u / z;
        p = w / z;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        cache.suffix[i] = s[i + 1] * q[i + 1] + (1.0 - q[i + 1]) * cache.suffix[i + 1];
    }
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let (a, p) = (cache.prefix_sum[i], cache.prefix_prod[i]);
        let m1 = a + s[i] * p;
        let m0 = a + p * cache.suffix[i];
        let (l, sat) = if m1 > 0.0 && m0 > 0.0 {
            clamp_logit(m1.ln() - m0.ln())
        } else if m1 > 0.0 {
            (logit_bound(), true)
        } else if m0 > 0.0 {
            (-logit_bound(), true)
        } else {
            (0.0, true)
        };
        cache.occupied.push(m1);
        cache.empty.push(m0);
        cache.saturated.push(sat);
        logits.push(l);
    }
    (logits, cache)
}

/// Factor-to-variable messages `mu_{r->i}(1)` for all voxels of a ray.
pub fn factor_to_variable(s: &[f64], q: &[f64]) -> Vec<f64> {
    factor_to_variable_logits(s, q).0.into_iter().map(sigmoid).collect()
}

/// Reverse pass of [`factor_to_variable_logits`]: accumulates into `ds`/`dq`
/// given the gradient on the message log-odds.
pub fn factor_to_variable_backward(
    s: &[f64],
    q: &[f64],
    cache: &FactorCache,
    d_logits: &[f64],
    ds: &mut [f64],
    dq: &mut [f64],
) {
    let n = s.len();
    let mut d_a = vec![0.0; n + 1];
    let mut d_p = vec![0.0; n + 1];
    let mut d_b = vec![0.0; n];
    for i in 0..n {
        if cache.saturated[i] || d_logits[i] == 0.0 {
            continue;
        }
        let d1 = d_logits[i] / cache.occupied[i];
        let d0 = -d_logits[i] / cache.empty[i];
        let p = cache.prefix_prod[i];
        d_a[i] += d1 + d0;
        ds[i] += d1 * p;
        d_p[i] += d1 * s[i] + d0 * cache.suffix[i];
        d_b[i] += d0 * p;
    }
    // suffix[i] = s[i+1] q[i+1] + (1 - q[i+1]) suffix[i+1], evaluated from the back
    for i in 0..n.saturating_sub(1) {
        let g = d_b[i];
        if g == 0.0 {
            continue;
        }
        ds[i + 1] += g * q[i + 1];
        dq[i + 1] += g * (s[i + 1] - cache.suffix[i + 1]);
        d_b[i + 1] += g * (1.0 - q[i + 1]);
    }
    // (a', p') = (u, w) / (u + w) with u = a + s q p, w = p (1 - q)
    for i in (0..n).rev() {
        let (ga, gp) = (d_a[i + 1], d_p[i + 1]);
        if ga == 0.0 && gp == 0.0 {
            continue;
        }
        let (a, p) = (cache.prefix_sum[i], cache.prefix_prod[i]);
        let u = a + s[i] * q[i] * p;
        let w = p * (1.0 - q[i]);
        let z = u + w;
        let c = (ga * u + gp * w) / (z * z);
        let du = ga / z - c;
        let dw = gp / z - c;
        d_a[i] += du;
        ds[i] += du * q[i] * p;
        dq[i] += du * s[i] * p - dw * p;
        d_p[i] += du * s[i] * q[i] + dw * (1.0 - q[i]);
    }
}

/// Depth distribution `p(d = d_i)` of a ray.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPosterior {
    pub ray_id: RayId,
    pub p: Vec<f64>,
    pub depths: Vec<f64>,
}

/// Log-domain first-occupied-voxel distribution `p_i ∝ w_i o_i prod_{j<i}(1 - o_j)`.
/// Returns `None` when the normalizer degenerates.
fn first_occupied(weights: &[f64], occ: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mut log_empty = 0.0;
    let mut lw = Vec::with_capacity(weights.len());
    for (w, o) in weights.iter().zip(occ) {
        lw.push(w.ln() + o.ln() + log_empty);
        log_empty += (1.0 - o).ln();
    }
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let z: f64 = lw.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + z.ln();
    if log_z < DEGENERATE_NORMALIZER.ln() {
        return None;
    }
    Some((lw.iter().map(|l| (l - log_z).exp()).collect(), log_z))
}

/// Cavity-form depth posterior from the surface distribution and the final
/// cavity occupancies along the ray.
pub fn depth_posterior_from(s: &[f64], q: &[f64]) -> Vec<f64> {
    match first_occupied(s, q) {
        Some((p, _)) => p,
        None => vec![1.0 / s.len() as f64; s.len()],
    }
}

/// Belief-form depth posterior `p_i ∝ b_i prod_{j<i}(1 - b_j)`.
pub fn depth_posterior_from_beliefs(beliefs: &[f64]) -> Vec<f64> {
    let ones = vec![1.0; beliefs.len()];
    match first_occupied(&ones, beliefs) {
        Some((p, _)) => p,
        None => vec![1.0 / beliefs.len() as f64; beliefs.len()],
    }
}

/// Reverse pass of [`depth_posterior_from`]; accumulates into `ds`/`dq`.
pub fn depth_posterior_backward(s: &[f64], q: &[f64], dp: &[f64], ds: &mut [f64], dq: &mut [f64]) {
    let Some((p, log_z)) = first_occupied(s, q) else {
        return;
    };
    let mean: f64 = p.iter().zip(dp).map(|(p, g)| p * g).sum();
    let n = s.len();
    // delta_i = d loss / d log w_i
    let delta: Vec<f64> = p.iter().zip(dp).map(|(p, g)| p * (g - mean)).collect();
    let mut log_empty = 0.0;
    for i in 0..n {
        // d p / d s_i computed without dividing by s_i so that s_i = 0 is safe.
        ds[i] += (dp[i] - mean) * (q[i].ln() + log_empty - log_z).exp();
        dq[i] += delta[i] / q[i];
        log_empty += (1.0 - q[i]).ln();
    }
    let mut tail = 0.0;
    for i in (0..n).rev() {
        dq[i] -= tail / (1.0 - q[i]);
        tail += delta[i];
    }
}

/// Ray factors wired to voxels. Factors are processed in ray-id order and
/// every voxel sums its incoming messages in that order, so results do not
/// depend on the order factors are supplied in.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    num_voxels: usize,
    /// Supplied factor index of the k-th factor in canonical order.
    order: Vec<usize>,
    /// Canonical position of each supplied factor.
    position: Vec<usize>,
    offsets: Vec<usize>,
    voxel: Vec<usize>,
    /// Distinct voxels touched by any factor.
    touched: Vec<usize>,
    slot: Vec<usize>,
    csr_offsets: Vec<usize>,
    csr: Vec<usize>,
}

impl FactorGraph {
    pub fn new(num_voxels: usize, traversals: &[&RayTraversal]) -> Self {
        let mut order: Vec<usize> = (0..traversals.len()).collect();
        order.sort_by_key(|&k| traversals[k].ray_id);
        let mut position = vec![0; order.len()];
        for (pos, &k) in order.iter().enumerate() {
            position[k] = pos;
        }
        let mut offsets = vec![0];
        let mut voxel = Vec::new();
        for &k in &order {
            voxel.extend_from_slice(&traversals[k].voxels);
            offsets.push(voxel.len());
        }
        let mut lookup: HashMap<usize, usize> = HashMap::new();
        let mut touched = Vec::new();
        let mut slot = Vec::with_capacity(voxel.len());
        let mut counts: Vec<usize> = Vec::new();
        for &v in &voxel {
            let t = *lookup.entry(v).or_insert_with(|| {
                touched.push(v);
                counts.push(0);
                touched.len() - 1
            });
            counts[t] += 1;
            slot.push(t);
        }
        let mut csr_offsets = vec![0; touched.len() + 1];
        for (t, c) in counts.iter().enumerate() {
            csr_offsets[t + 1] = csr_offsets[t] + c;
        }
        let mut fill = csr_offsets.clone();
        let mut csr = vec![0; voxel.len()];
        for (e, &t) in slot.iter().enumerate() {
            csr[fill[t]] = e;
            fill[t] += 1;
        }
        FactorGraph {
            num_voxels,
            order,
            position,
            offsets,
            voxel,
            touched,
            slot,
            csr_offsets,
            csr,
        }
    }

    pub fn num_factors(&self) -> usize {
        self.order.len()
    }

    pub fn num_incidences(&self) -> usize {
        self.voxel.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.num_voxels
    }

    /// Incidence range of the supplied factor `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let pos = self.position[k];
        self.offsets[pos]..self.offsets[pos + 1]
    }

    fn canonical_range(&self, pos: usize) -> std::ops::Range<usize> {
        self.offsets[pos]..self.offsets[pos + 1]
    }

    /// Sum of incoming factor log-odds per touched voxel, in canonical order.
    fn voxel_sums(&self, logits: &[f64]) -> Vec<f64> {
        (0..self.touched.len())
            .map(|t| self.csr[self.csr_offsets[t]..self.csr_offsets[t + 1]].iter().map(|&e| logits[e]).sum())
            .collect()
    }

    /// Variable-to-factor sweep: clamped cavity occupancies per incidence.
    fn cavities(&self, logits: &[f64], logit_gamma: f64) -> (Vec<f64>, Vec<bool>) {
        let sums = self.voxel_sums(logits);
        self.slot
            .iter()
            .zip(logits)
            .map(|(&t, &l)| {
                let (x, sat) = clamp_logit(logit_gamma + sums[t] - l);
                (sigmoid(x), sat)
            })
            .unzip()
    }

    /// Gradient of the cavity sweep: maps `dq` to gradients on the incoming
    /// factor log-odds and on `logit(gamma)`.
    fn cavities_backward(&self, cavity: &[f64], saturated: &[bool], dq: &[f64]) -> (Vec<f64>, f64) {
        let dx: Vec<f64> = cavity
            .iter()
            .zip(saturated)
            .zip(dq)
            .map(|((&q, &sat), &g)| if sat { 0.0 } else { g * q * (1.0 - q) })
            .collect();
        let sums = self.voxel_sums(&dx);
        let d_logits = self.slot.iter().zip(&dx).map(|(&t, &d)| sums[t] - d).collect();
        (d_logits, dx.iter().sum())
    }
}

/// Everything recorded by an unrolled BP run for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct BpTrace {
    /// Cavity occupancies entering iteration `t`; the last entry is the final
    /// sweep used for depth posteriors.
    pub cavity: Vec<Vec<f64>>,
    saturated: Vec<Vec<bool>>,
    /// Factor message log-odds produced by iteration `t`.
    pub logits: Vec<Vec<f64>>,
    caches: Vec<Vec<FactorCache>>,
    /// Max absolute change of any factor message `mu(1)` per iteration.
    pub max_change: Vec<f64>,
}

/// Runs `iterations` synchronous BP sweeps. `s` holds the surface
/// distribution of each supplied factor.
pub fn run_unrolled(graph: &FactorGraph, s: &[&[f64]], logit_gamma: f64, iterations: usize, record: bool) -> BpTrace {
    let mut trace = BpTrace::default();
    let mut logits = vec![0.0; graph.num_incidences()];
    for _ in 0..iterations {
        let (cavity, saturated) = graph.cavities(&logits, logit_gamma);
        let results: Vec<(Vec<f64>, FactorCache)> = (0..graph.num_factors())
            .into_par_iter()
            .map(|pos| {
                let r = graph.canonical_range(pos);
                factor_to_variable_logits(s[graph.order[pos]], &cavity[r])
            })
            .collect();
        let mut next = Vec::with_capacity(logits.len());
        let mut caches = Vec::with_capacity(results.len());
        for (l, c) in results {
            next.extend(l);
            caches.push(c);
        }
        let change = next
            .iter()
            .zip(&logits)
            .map(|(a, b)| (sigmoid(*a) - sigmoid(*b)).abs())
            .fold(0.0, f64::max);
        trace.max_change.push(change);
        if record {
            trace.cavity.push(cavity);
            trace.saturated.push(saturated);
            trace.logits.push(next.clone());
            trace.caches.push(caches);
        }
        logits = next;
    }
    let (cavity, saturated) = graph.cavities(&logits, logit_gamma);
    if !record {
        trace.logits.push(logits);
    }
    trace.cavity.push(cavity);
    trace.saturated.push(saturated);
    trace
}

/// Reverse pass through [`run_unrolled`] (which must have been recorded).
/// `d_final` is the gradient on the final cavity occupancies. Returns the
/// gradient on each supplied factor's `s` and on `logit(gamma)`.
pub fn unrolled_backward(graph: &FactorGraph, s: &[&[f64]], trace: &BpTrace, d_final: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let iterations = trace.caches.len();
    if trace.cavity.len() != iterations + 1 || d_final.len() != graph.num_incidences() {
        return Err(Error::TapeMismatch("BP trace does not match the factor graph".into()));
    }
    let mut ds: Vec<Vec<f64>> = (0..graph.num_factors()).map(|k| vec![0.0; s[k].len()]).collect();
    let (mut d_logits, mut d_gamma) = graph.cavities_backward(&trace.cavity[iterations], &trace.saturated[iterations], d_final);
    for t in (0..iterations).rev() {
        let cavity = &trace.cavity[t];
        let mut dq = vec![0.0; cavity.len()];
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..graph.num_factors())
            .into_par_iter()
            .map(|pos| {
                let r = graph.canonical_range(pos);
                let sk = s[graph.order[pos]];
                let mut ds_k = vec![0.0; sk.len()];
                let mut dq_k = vec![0.0; sk.len()];
                factor_to_variable_backward(sk, &cavity[r.clone()], &trace.caches[t][pos], &d_logits[r], &mut ds_k, &mut dq_k);
                (ds_k, dq_k)
            })
            .collect();
        for (pos, (ds_k, dq_k)) in parts.into_iter().enumerate() {
            let k = graph.order[pos];
            ds[k].iter_mut().zip(&ds_k).for_each(|(a, b)| *a += b);
            dq[graph.canonical_range(pos)].copy_from_slice(&dq_k);
        }
        let (dl, dg) = graph.cavities_backward(cavity, &trace.saturated[t], &dq);
        d_gamma += dg;
        // Messages entering the first iteration are constants.
        d_logits = dl;
    }
    Ok((ds, d_gamma))
}

/// Messages and beliefs after BP.
#[derive(Debug, Clone)]
pub struct MessageState {
    pub graph: FactorGraph,
    /// `mu_{r->i}(1)` per incidence, grouped by canonical factor order.
    pub to_voxel: Vec<f64>,
    /// Final cavity occupancies `q_i^r` per incidence.
    pub to_factor: Vec<f64>,
    /// Occupancy belief of every grid voxel.
    pub beliefs: Vec<f64>,
    /// Max absolute message change per iteration.
    pub max_change: Vec<f64>,
}

impl MessageState {
    /// Final cavity occupancies along supplied factor `k`.
    pub fn cavity(&self, k: usize) -> &[f64] {
        &self.to_factor[self.graph.range(k)]
    }

    pub fn incoming(&self, k: usize) -> &[f64] {
        &self.to_voxel[self.graph.range(k)]
    }
}

pub fn run_bp(num_voxels: usize, factors: &[RayFactor], config: &BpConfig) -> MessageState {
    let traversals: Vec<&RayTraversal> = factors.iter().map(|f| &f.traversal).collect();
    let s: Vec<&[f64]> = factors.iter().map(|f| f.s.as_slice()).collect();
    let graph = FactorGraph::new(num_voxels, &traversals);
    let logit_gamma = logit(config.unary.gamma);
    let mut trace = run_unrolled(&graph, &s, logit_gamma, config.iterations, false);
    let logits = trace.logits.pop().unwrap_or_default();
    let to_factor = trace.cavity.pop().unwrap_or_default();
    let sums = graph.voxel_sums(&logits);
    let mut beliefs = vec![config.unary.gamma; num_voxels];
    for (t, &v) in graph.touched.iter().enumerate() {
        beliefs[v] = sigmoid(clamp_logit(logit_gamma + sums[t]).0);
    }
    MessageState {
        to_voxel: logits.iter().map(|&l| sigmoid(l)).collect(),
        to_factor,
        beliefs,
        max_change: trace.max_change,
        graph,
    }
}

/// Depth posterior of supplied factor `k` after BP.
pub fn depth_posterior(factors: &[RayFactor], k: usize, state: &MessageState, mode: PosteriorMode) -> DepthPosterior {
    let f = &factors[k];
    let p = match mode {
        PosteriorMode::Cavity => depth_posterior_from(&f.s, state.cavity(k)),
        PosteriorMode::Belief => {
            let b: Vec<f64> = f.traversal.voxels.iter().map(|&v| state.beliefs[v]).collect();
            depth_posterior_from_beliefs(&b)
        }
    };
    DepthPosterior {
        ray_id: f.ray_id(),
        p,
        depths: f.traversal.depths.clone(),
    }
}

pub fn depth_posteriors(factors: &[RayFactor], state: &MessageState, mode: PosteriorMode) -> Vec<DepthPosterior> {
    (0..factors.len())
        .into_par_iter()
        .map(|k| depth_posterior(factors, k, state, mode))
        .collect()
}
