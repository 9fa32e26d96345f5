mod common;

use common::random_image;
use mcl_core::causal::{CausalEffect, EffectProfile};
use mcl_core::checkpoint::Checkpoint;
use mcl_core::data::{make_corrupted, split, CorruptionSpec, Dataset};
use mcl_core::imgops::{apply_factor, sample_factor_subset, Factor, Image, TransformSpec};
use mcl_core::model::{Network, NetworkSpec};
use mcl_core::objective::mapping_weights;
use mcl_core::trainer::{TrainConfig, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..4, 4usize..10, 4usize..10, any::<u64>()).prop_map(|(c, h, w, seed)| {
        let c = if c == 2 { 3 } else { c };
        random_image(&mut ChaCha8Rng::seed_from_u64(seed), h, w, c)
    })
}

fn factor_strategy() -> impl Strategy<Value = Factor> {
    (0usize..16).prop_map(|i| Factor::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_are_range_safe(img in image_strategy(), f in factor_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = TransformSpec { factor: f, degree: f.sample_degree(&mut rng), noise_seed: Some(seed) };
        let out = apply_factor(&img, &spec).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(apply_factor(&img, &spec).unwrap(), out);
    }

    #[test]
    fn identity_degrees_and_involutions(img in image_strategy(), f in factor_strategy()) {
        match f.identity_degree() {
            Some(d) => {
                let spec = TransformSpec { factor: f, degree: Some(d), noise_seed: Some(1) };
                prop_assert_eq!(apply_factor(&img, &spec).unwrap(), img);
            }
            None if matches!(f, Factor::Invert | Factor::Flip) => {
                let spec = TransformSpec::new(f, None);
                let once = apply_factor(&img, &spec).unwrap();
                prop_assert_eq!(apply_factor(&once, &spec).unwrap(), img);
            }
            None => {}
        }
    }

    #[test]
    fn mapping_weights_on_simplex(seed in any::<u64>(), classes in 2usize..6, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetworkSpec { height: 4, width: 4, channels: 1, classes, feature_dim: 2, factors: k, conv_channels: [1, 1], weight_hidden: 5 };
        let mut net = Network::<f64>::init(spec, seed).unwrap();
        for v in net.weigher.fc2_w.value.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        let profile = EffectProfile {
            sample_id: 0,
            effects: (0..k).map(|_| CausalEffect { factor: Factor::Rotate, effect: (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect() }).collect(),
        };
        let w = mapping_weights(&net, &profile).unwrap();
        prop_assert!(w.values().iter().all(|&v| v > 0.0));
        prop_assert!((w.values().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 0usize..60, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (a, b) = (a.min(b), a.max(b));
        let fr = [a, b - a, 1.0 - b];
        let images = (0..n).map(|i| Image::filled(4, 4, 1, i as f32 / 64.0).unwrap()).collect();
        let ds = Dataset::new("p", images, vec![0; n]).unwrap();
        let (x, y, z) = split(&ds, seed, fr).unwrap();
        prop_assert_eq!(x.len() + y.len() + z.len(), n);
        let mut seen: Vec<f32> = x.images.iter().chain(&y.images).chain(&z.images).map(|i| i.pixels()[0]).collect();
        seen.sort_by(|p, q| p.partial_cmp(q).unwrap());
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
    }
}

#[test]
fn subset_inclusion_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    let mut counts = [0usize; 16];
    for _ in 0..draws {
        let s = sample_factor_subset(&mut rng, &Factor::ALL, 1, 3).unwrap();
        let mut seen = s.factors().to_vec();
        seen.sort_by_key(|f| f.index());
        seen.dedup();
        assert_eq!(seen.len(), s.len());
        for f in s.factors() {
            counts[f.index()] += 1;
        }
    }
    let p = 2.0 / 16.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - draws as f64 * p).abs();
        assert!(dev <= 3.0 * sigma, "{}: {c} draws, expected {:.0} +- {:.0}", Factor::ALL[i], draws as f64 * p, 3.0 * sigma);
    }
}

#[test]
fn gaussian_severity_is_monotone_in_pixel_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = (0..100).map(|_| random_image(&mut rng, 8, 8, 1)).collect();
    let clean = Dataset::new("clean", images, vec![0; 100]).unwrap();
    let mut last = 0.0;
    for severity in 1..=5 {
        let c = make_corrupted(&clean, &CorruptionSpec { factor: Factor::NoiseGaussian, severity, seed: 9 }).unwrap();
        let diff: f64 = clean.images.iter().zip(&c.images).map(|(a, b)| a.mean_abs_diff(b)).sum::<f64>() / 100.0;
        assert!(diff >= last, "severity {severity}: {diff} < {last}");
        last = diff;
    }
}

#[test]
fn checkpoint_round_trip_for_random_networks() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = TrainConfig::new(seed, 1, Variant::Full, "x-images-idx3");
        cfg.classes = rng.gen_range(2..6);
        let k = cfg.catalog().unwrap().len();
        let spec = NetworkSpec { height: 8, width: 8, channels: 3, classes: cfg.classes, feature_dim: 5, factors: k, conv_channels: [2, 2], weight_hidden: 3 };
        let mut net = Network::<f32>::init(spec, seed).unwrap();
        for p in net.params_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let c = Checkpoint { network: net, catalog: cfg.catalog().unwrap(), seed, config: cfg };
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.network.param_count(), c.network.param_count());
    }
}
