use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayfuse_core::dataset::Dataset;
use rayfuse_core::eval::DepthMap;
use rayfuse_core::frontend::{FrontendConfig, FrontendMode, LinearEmbedding};
use rayfuse_core::learn::{
    expected_loss, gradcheck, gradcheck_with, sample_batch, train, LearnConfig, LearnableParams, Model, RayBatch, Stage,
    TrainState, GRADCHECK_TOLERANCE,
};
use rayfuse_core::synth::{generate_scene_with, SceneConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_dataset(seed: u64) -> Dataset {
    let mut cfg = SceneConfig::new([8, 8, 8], 6);
    cfg.noise_sigma = 0.01;
    Dataset::from_scene(&generate_scene_with(seed, &cfg).unwrap())
}

fn linear_frontend() -> FrontendConfig {
    FrontendConfig {
        mode: FrontendMode::Linear,
        patch_size: 3,
        num_adjacent: 2,
        temperature: 0.3,
        channels: 4,
        ..FrontendConfig::default()
    }
}

fn linear_params(seed: u64) -> LearnableParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LearnableParams::new(Some(LinearEmbedding::random(4, 9, &mut rng)), 0.3, 0.1)
}

fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    1.0 - ChiSquared::new((observed.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..6 {
        let report = gradcheck(seed).unwrap();
        assert!(report.rays <= 50 && report.max_voxels_per_ray <= 12);
        let names: Vec<_> = report.groups.iter().map(|g| g.group).collect();
        assert_eq!(names, ["W", "tau", "gamma", "s"]);
        for g in &report.groups {
            assert!(g.max_relative_error < GRADCHECK_TOLERANCE, "seed {seed}: {g:?}");
        }
    }
}

#[test]
fn perturbed_gradients_fail_the_check() {
    let report = gradcheck_with(1, |g| g.logit_gamma *= 1.01).unwrap();
    assert!(!report.passed());
    let report = gradcheck_with(1, |g| g.embedding.as_mut().unwrap()[0] += 1e-3).unwrap();
    assert!(report.groups[0].max_relative_error > GRADCHECK_TOLERANCE);
}

#[test]
fn window_start_is_uniform() {
    let mut gt: Vec<Option<DepthMap>> = Vec::new();
    for v in 0..8 {
        let mut d = DepthMap::invalid(v, 4, 4);
        d.set(0, 0, 1.0);
        gt.push(Some(d));
    }
    gt.insert(3, None);
    let window = 3;
    let starts = 8 - window + 1;
    let mut counts = vec![0.0; starts];
    let trials = 3000;
    for seed in 0..trials {
        counts[sample_batch(&gt, seed, 10, window).unwrap().window.start] += 1.0;
    }
    let expected = vec![trials as f64 / starts as f64; starts];
    assert!(chi_square_p(&counts, &expected) > 1e-3, "{counts:?}");
}

#[test]
fn rays_within_window_are_uniform() {
    let mut d = DepthMap::invalid(0, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for r in 0..5 {
        for c in 0..6 {
            if rng.random_bool(0.7) {
                d.set(r, c, 1.0 + r as f64);
            }
        }
    }
    let valid: Vec<(usize, usize)> = (0..5).flat_map(|r| (0..6).map(move |c| (r, c))).filter(|&(r, c)| d.get(r, c).is_some()).collect();
    let gt = vec![Some(d)];
    let mut counts = vec![0.0; valid.len()];
    let trials = 4000;
    for seed in 0..trials {
        let b = sample_batch(&gt, seed, 5, 1).unwrap();
        assert_eq!(b.rays.len(), 5);
        for (id, depth) in b.rays {
            assert_eq!(depth, 1.0 + id.row as f64);
            counts[valid.iter().position(|&p| p == (id.row, id.col)).unwrap()] += 1.0;
        }
    }
    let expected = vec![trials as f64 * 5.0 / valid.len() as f64; valid.len()];
    assert!(chi_square_p(&counts, &expected) > 1e-3);
}

#[test]
fn insufficient_ground_truth_is_reported() {
    let gt = vec![Some(DepthMap::invalid(0, 2, 2)), None];
    assert!(sample_batch(&gt, 0, 10, 1).is_err());
}

#[test]
fn duplicated_batch_doubles_risk_and_gradients() {
    let data = small_dataset(2);
    let model = Model::new(&data, linear_frontend(), 3);
    let params = linear_params(1);
    let batch = sample_batch(&data.gt_depth, 4, 30, 2).unwrap();
    let mut doubled = batch.clone();
    doubled.rays.extend(batch.rays.clone());
    let (r1, g1, _) = model.batch_risk_and_gradients(&batch, &params, Stage::EndToEnd).unwrap();
    let (r2, g2, _) = model.batch_risk_and_gradients(&doubled, &params, Stage::EndToEnd).unwrap();
    assert!(r1 > 0.0);
    assert_eq!(r2, 2.0 * r1);
    let a: Vec<f64> = g1.to_vec().iter().map(|x| 2.0 * x).collect();
    assert_eq!(a, g2.to_vec());
}

#[test]
fn tape_replay_matches_forward_risk() {
    let data = small_dataset(5);
    let model = Model::new(&data, linear_frontend(), 3);
    let params = linear_params(2);
    let batch = sample_batch(&data.gt_depth, 1, 50, 3).unwrap();
    let tape = model.forward(&batch, &params, Stage::EndToEnd).unwrap();
    assert_eq!(tape.replay(), tape.risk);
    let manual: f64 = tape
        .posteriors
        .iter()
        .zip(&tape.traversals)
        .zip(&tape.d_star)
        .map(|((p, t), &d)| expected_loss(p, &t.depths, d).unwrap())
        .sum();
    assert!((manual - tape.risk).abs() < 1e-12 * tape.risk.max(1.0));
    let mut other = params.clone();
    other.temperature *= 2.0;
    assert!(model.backward(&tape, &other).is_err());
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let data = small_dataset(3);
    let model = Model::new(&data, linear_frontend(), 2);
    let config = LearnConfig {
        learning_rate: Some(0.0),
        steps: 4,
        batch_size: 20,
        window: 2,
        ..LearnConfig::default()
    };
    let params = linear_params(4);
    let (state, records) = train(&model, &config, TrainState::new(params.clone(), &config)).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(state.params, params);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(4);
    let model = Model::new(&data, linear_frontend(), 2);
    let base = LearnConfig {
        learning_rate: Some(1e-2),
        steps: 6,
        batch_size: 25,
        window: 2,
        seed: 9,
        ..LearnConfig::default()
    };
    let (full, _) = train(&model, &base, TrainState::new(linear_params(5), &base)).unwrap();

    let ckpt = dir.path().join("state.rnt");
    let first = LearnConfig {
        steps: 3,
        checkpoint: Some(ckpt.clone()),
        log: Some(dir.path().join("log.csv")),
        ..base.clone()
    };
    train(&model, &first, TrainState::new(linear_params(5), &first)).unwrap();
    let restored = TrainState::load(&ckpt, &base).unwrap();
    assert_eq!(restored.step, 3);
    let (resumed, _) = train(&model, &base, restored).unwrap();
    assert_eq!(resumed, full);

    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,risk,gamma,grad_norm");
    assert_eq!(lines.len(), 4);
}

#[test]
fn training_reduces_risk_on_a_fixed_batch() {
    let data = small_dataset(6);
    let frontend = FrontendConfig {
        mode: FrontendMode::Zncc,
        patch_size: 3,
        num_adjacent: 2,
        temperature: 1.0,
        ..FrontendConfig::default()
    };
    let model = Model::new(&data, frontend, 3);
    let config = LearnConfig {
        learning_rate: Some(0.05),
        steps: 40,
        batch_size: 200,
        window: 3,
        ..LearnConfig::default()
    };
    let params = LearnableParams::new(None, 1.0, 0.05);
    let eval: RayBatch = sample_batch(&data.gt_depth, 1234, 400, 6).unwrap();
    let before = model.forward(&eval, &params, Stage::EndToEnd).unwrap().risk;
    let (state, _) = train(&model, &config, TrainState::new(params, &config)).unwrap();
    let after = model.forward(&eval, &state.params, Stage::EndToEnd).unwrap().risk;
    assert!(after < 0.9 * before, "{before} -> {after}");
}

#[test]
fn pretrain_stage_leaves_gamma_untouched() {
    let data = small_dataset(7);
    let model = Model::new(&data, linear_frontend(), 3);
    let config = LearnConfig {
        stage: Stage::Pretrain,
        steps: 3,
        batch_size: 20,
        window: 2,
        ..LearnConfig::default()
    };
    let params = linear_params(8);
    let (state, records) = train(&model, &config, TrainState::new(params.clone(), &config)).unwrap();
    assert_eq!(state.params.logit_gamma, params.logit_gamma);
    assert_ne!(state.params.embedding, params.embedding);
    assert!(records.iter().all(|r| r.risk.is_finite()));
}
