mod common;

use common::random_points;
use progcloud::codec::{total_loss, Codec, LossInputs, LossWeights, ModelConfig};
use progcloud::density::DropBounds;
use progcloud::entropy::{quantize_infer, quantize_train};
use progcloud::metrics::chamfer_distance;
use progcloud::nn::Tensor;
use progcloud::synth::{generate_synthetic, Shape};
use progcloud::taildrop::sample_training_drop;
use progcloud::train::{DropPolicy, Trainer};
use progcloud::PointCloud;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        c: 8,
        c_xyz: 4,
        hidden: 16,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn toy_data() -> Vec<PointCloud> {
    (0..6)
        .map(|i| {
            let shape = [Shape::SphereSurface, Shape::GaussianClusters, Shape::Plane][i % 3];
            generate_synthetic(shape, 384, 2.0, 40 + i as u64).unwrap()
        })
        .collect()
}

fn trained_toy() -> Codec {
    let data = toy_data();
    let mut t = Trainer::new(
        Codec::new(toy_cfg()).unwrap(),
        LossWeights::default(),
        DropPolicy::default(),
        ChaCha8Rng::seed_from_u64(1),
    );
    for step in 0..40 {
        let i = (2 * step) % data.len();
        t.step(&data[i..i + 2], 1e-2).unwrap();
    }
    t.codec
}

#[test]
fn encoding_ignores_point_order() {
    let codec = Codec::new(toy_cfg()).unwrap();
    for seed in 0..4 {
        let pts = random_points(150, seed);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
        let a = codec.encode(&PointCloud::new(pts, "a").unwrap()).unwrap();
        let b = codec.encode(&PointCloud::new(shuffled, "b").unwrap()).unwrap();
        assert_eq!(a.sample_coords, b.sample_coords);
        for (x, y) in a.z.data.iter().zip(&b.z.data).chain(a.z_xyz.data.iter().zip(&b.z_xyz.data)) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert_eq!(a.d, b.d);
    }
}

#[test]
fn output_size_is_bounded_by_the_architecture() {
    let codec = Codec::new(toy_cfg()).unwrap();
    let pc = generate_synthetic(Shape::GaussianClusters, 480, 5.0, 3).unwrap();
    let lat = codec.encode(&pc).unwrap();
    let out = codec
        .decode(&quantize_infer(&lat.z), &quantize_infer(&lat.z_xyz), &lat.d)
        .unwrap();
    assert!(out.len() <= lat.m * codec.cfg.max_children());
    assert!(out.len() >= lat.m);
}

#[test]
fn zeroed_features_collapse_towards_anchors() {
    let codec = trained_toy();
    let clouds: Vec<PointCloud> = toy_data().into_iter().take(3).collect();
    for (i, pc) in clouds.iter().enumerate() {
        let lat = codec.encode(pc).unwrap();
        let x_hat = quantize_infer(&lat.z_xyz);
        let zero = Tensor::zeros(lat.m, codec.cfg.c);
        let out = codec.decode(&zero, &x_hat, &lat.d).unwrap();
        let anchors = PointCloud::new(codec.decode_anchors(&x_hat).unwrap(), "anchors").unwrap();
        // Originals paired with the wrong latent: a cloud of another shape.
        let other = &clouds[(i + 1) % clouds.len()];
        assert!(chamfer_distance(&out, &anchors) < chamfer_distance(&out, other));
    }
}

#[test]
fn training_step_reports_consistent_totals() {
    let data = toy_data();
    let w = LossWeights::default();
    let mut t = Trainer::new(Codec::new(toy_cfg()).unwrap(), w, DropPolicy::default(), ChaCha8Rng::seed_from_u64(3));
    for _ in 0..3 {
        let r = t.step(&data[..3], 1e-3).unwrap();
        let b = r.loss;
        let again = b.cd + w.sigma * b.dens + w.omega * b.coord + w.eta * b.points + w.lambda * b.bpp;
        assert!((b.total - again).abs() <= 1e-12);
        assert_eq!(r.rho.len(), 3);
        assert!(r.rho.iter().all(|rho| (0.0..1.0).contains(rho)));
    }
}

#[test]
fn training_is_reproducible() {
    let data = toy_data();
    let run = || {
        let mut t = Trainer::new(
            Codec::new(toy_cfg()).unwrap(),
            LossWeights::default(),
            DropPolicy::default(),
            ChaCha8Rng::seed_from_u64(8),
        );
        for _ in 0..3 {
            t.step(&data[..2], 1e-3).unwrap();
        }
        t.codec.store
    };
    assert_eq!(run(), run());
}

#[test]
fn perfect_reconstruction_at_zero_rate_costs_nothing() {
    let pc = generate_synthetic(Shape::Plane, 64, 1.0, 1).unwrap();
    let d = vec![16.0; 4];
    let zx = Tensor::new(4, 2, vec![1.0, -2.0, 3.0, 0.0, 1.0, 1.0, 2.0, 5.0]);
    let inputs = LossInputs {
        original: &pc,
        reconstruction: &pc,
        predicted_counts: &d,
        d_num: &d,
        z_xyz: &zx,
        z_xyz_hat: &zx,
        bpp: 0.0,
    };
    assert_eq!(total_loss(&inputs, LossWeights::default()).unwrap().total, 0.0);

    let recon = generate_synthetic(Shape::Plane, 60, 1.0, 2).unwrap();
    let counts = vec![15.0, 17.5, 14.0, 16.0];
    let inputs = LossInputs { reconstruction: &recon, predicted_counts: &counts, bpp: 0.8, ..inputs };
    let w = LossWeights::default();
    let a = total_loss(&inputs, w).unwrap();
    let b = total_loss(&inputs, LossWeights { lambda: 2.0 * w.lambda, ..w }).unwrap();
    assert!((b.total - a.total - w.lambda * 0.8).abs() < 1e-15);
}

#[test]
fn training_drop_mixture_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = DropBounds::default();
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_training_drop(0.5, 32, b, 0.5, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want = 0.5 * 0.275 + 0.5 * (31.0 / 64.0);
    assert!((mean - want).abs() <= 3.0 * (var / n as f64).sqrt(), "{mean} vs {want}");
}

#[test]
fn additive_noise_is_centred() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = quantize_train(&Tensor::zeros(1000, 100), &mut rng);
    let mean = t.sum() / t.len() as f64;
    // Uniform(-1/2, 1/2) has variance 1/12.
    assert!(mean.abs() <= 3.0 * (1.0 / 12.0 / t.len() as f64).sqrt());
    assert!(t.data.iter().all(|v| v.abs() <= 0.5));
}
