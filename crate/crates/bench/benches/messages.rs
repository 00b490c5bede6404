use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayfuse_core::mrf::{factor_to_variable, run_bp, BpConfig, RayFactor};
use rayfuse_core::{RayId, RayTraversal};

fn ray(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let q = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    (raw.into_iter().map(|x| x / z).collect(), q)
}

fn factor_messages(c: &mut Criterion) {
    let mut group = c.benchmark_group("factor_to_variable");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [16usize, 64, 256, 1024] {
        let (s, q) = ray(&mut rng, n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| factor_to_variable(&s, &q)));
    }
    group.finish();
}

fn belief_propagation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let num_voxels = 32 * 32 * 32;
    let factors: Vec<RayFactor> = (0..4096)
        .map(|k| {
            let n = 48;
            let start = rng.random_range(0..num_voxels - n * 33);
            let voxels: Vec<usize> = (0..n).map(|i| start + i * 33).collect();
            let depths = (0..n).map(|i| 1.0 + i as f64).collect();
            let (s, _) = ray(&mut rng, n);
            let traversal = RayTraversal { ray_id: RayId { view: 0, row: k / 64, col: k % 64 }, voxels, depths };
            RayFactor::new(traversal, s).unwrap()
        })
        .collect();
    c.bench_function("run_bp_4096_rays_3_iterations", |b| b.iter(|| run_bp(num_voxels, &factors, &BpConfig::default())));
}

criterion_group!(benches, factor_messages, belief_propagation);
criterion_main!(benches);
