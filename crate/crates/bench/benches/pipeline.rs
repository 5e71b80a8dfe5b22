use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posekit::grid::{bin_features, GridSpec};
use posekit::net::{backward, forward_batch, init_params, Mode, SppNetConfig};
use posekit::scene::{preprocess_scene, Keypoint};
use posekit::synthesis::{run_algorithm1, AugmentationConfig};
use posekit::toyscene::{generate, ToySceneConfig};

fn keypoints(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Keypoint> {
    (0..n)
        .map(|_| Keypoint {
            p: rng.random_range(0.0..640.0),
            q: rng.random_range(0.0..480.0),
            scale: rng.random_range(1.0..30.0),
            orientation: rng.random_range(-3.1..3.1),
            descriptor: (0..dim).map(|_| rng.random_range(0.0f32..0.2)).collect(),
        })
        .collect()
}

fn binning(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kps = keypoints(&mut rng, 2000, 128);
    let spec = GridSpec::new(32, 32);
    c.bench_function("bin 2000 keypoints into 32x32", |b| {
        b.iter(|| bin_features(black_box(&kps), 640, 480, &spec, 128, &mut rng).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SppNetConfig::default();
    let params = init_params(&cfg, &mut rng).unwrap();
    let kps = keypoints(&mut rng, 1000, 128);
    let grid = bin_features(&kps, 640, 480, &GridSpec::new(32, 32), 128, &mut rng).unwrap();
    let batch = [&grid];
    let mut group = c.benchmark_group("default network");
    group.sample_size(10);
    group.bench_function("forward, eval mode", |b| {
        b.iter(|| forward_batch(&params, black_box(&batch), Mode::Eval, &mut rng).unwrap())
    });
    group.bench_function("forward and backward, train mode", |b| {
        b.iter(|| {
            let out = forward_batch(&params, black_box(&batch), Mode::Train, &mut rng).unwrap();
            backward(&params, &out.trace, &[[1.0; 3]], &[[1.0; 4]]).unwrap()
        })
    });
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let toy = generate(&ToySceneConfig::default()).unwrap();
    let pre = preprocess_scene(&toy.scene, &toy.test_ids);
    let cfg = AugmentationConfig {
        samples_per_pose: 5,
        ..Default::default()
    };
    let mut group = c.benchmark_group("synthesis");
    group.sample_size(10);
    group.bench_function("toy scene, 5 samples per pose", |b| {
        b.iter_batched(
            || pre.clone(),
            |scene| run_algorithm1(&scene, &cfg, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, binning, network, synthesis);
criterion_main!(benches);
