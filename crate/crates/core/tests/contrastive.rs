use gtp_core::checkpoint::NamedParams;
use gtp_core::contrastive::{
    embed_patches, load_encoder, nt_xent_loss, nt_xent_value, pretrain_encoder, save_encoder, AugmentationConfig,
    EncoderConfig, EncoderParams, PretrainConfig, RgbImage,
};
use gtp_core::numerics::{grad_check, Tensor};
use gtp_core::rng;
use gtp_core::GtpError;
use proptest::prelude::*;

/// Literal double loop over every ordered positive pair.
fn brute_force_nt_xent(z: &Tensor, tau: f64) -> f64 {
    let n = z.rows();
    let cos = |a: usize, b: usize| {
        let (u, v) = (z.row(a), z.row(b));
        let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (nu * nv)
    };
    let mut total = 0.0;
    for i in 0..n {
        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
        let num = (cos(i, j) / tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (cos(i, k) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

fn random_z(seed: u64, k: usize, d: usize) -> Tensor {
    rng::normal_tensor(&mut rng::stream(seed, 0), &[2 * k, d], 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn matches_brute_force(seed in any::<u64>(), k in 1usize..=8, tau in 0.05f64..2.0) {
        let z = random_z(seed, k, 5);
        let got = nt_xent_value(&z, tau).unwrap();
        let want = brute_force_nt_xent(&z, tau);
        prop_assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn per_row_rescaling_is_invisible(seed in any::<u64>(), k in 1usize..=8) {
        let z = random_z(seed, k, 4);
        let scales = rng::normal_tensor(&mut rng::stream(seed, 1), &[2 * k], 1.0);
        let mut scaled = z.clone();
        for r in 0..2 * k {
            let s = scales.data()[r].abs() + 0.1;
            for c in 0..4 {
                scaled.set(r, c, z.get(r, c) * s);
            }
        }
        let a = nt_xent_value(&z, 0.5).unwrap();
        let b = nt_xent_value(&scaled, 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn swapping_views_is_invisible(seed in any::<u64>(), k in 1usize..=8) {
        let z = random_z(seed, k, 4);
        let swapped = z.permute_rows(&(0..2 * k).map(|i| i ^ 1).collect::<Vec<_>>());
        let a = nt_xent_value(&z, 0.5).unwrap();
        let b = nt_xent_value(&swapped, 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let report = grad_check(|t, v| nt_xent_loss(t, v[0], 0.5), &[random_z(seed, 2, 4)], 1e-6, 1e-4).unwrap();
        assert!(report.passed(), "{}", report.max_rel_err);
    }
}

fn stripes(n: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let noise = rng::normal_tensor(&mut r, &[size * size * 3], 0.05);
            let freq = if i % 2 == 0 { 2.0 } else { 6.0 };
            let data = (0..size * size * 3)
                .map(|j| {
                    let x = (j / 3) % size;
                    (0.5 + 0.4 * (freq * x as f64 / size as f64 * std::f64::consts::TAU).sin() + noise.data()[j])
                        .clamp(0.0, 1.0)
                })
                .collect();
            RgbImage {
                height: size,
                width: size,
                data,
            }
        })
        .collect()
}

fn tiny_config() -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig {
            input_size: 16,
            channels: vec![4, 8],
            embed_dim: 8,
            proj_dim: 4,
        },
        steps: 3,
        batch: 4,
        lr: 1e-3,
        seed: 5,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_is_deterministic() {
    let corpus = stripes(12, 16, 1);
    let (a, log_a) = pretrain_encoder(&corpus, &tiny_config()).unwrap();
    let (b, log_b) = pretrain_encoder(&corpus, &tiny_config()).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 3);
    assert!(log_a.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn corpus_smaller_than_batch_is_rejected() {
    let corpus = stripes(3, 16, 1);
    assert!(matches!(pretrain_encoder(&corpus, &tiny_config()), Err(GtpError::InvalidArgument(_))));
}

#[test]
fn embeddings_have_one_row_per_patch() {
    let params = EncoderParams::init(tiny_config().encoder, 0).unwrap();
    let mut corpus = stripes(70, 16, 2);
    corpus[69] = corpus[3].clone();
    let f = embed_patches(&params, &corpus).unwrap();
    assert_eq!(f.shape(), &[70, 8]);
    assert_eq!(f.row(3), f.row(69));
}

#[test]
fn encoder_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let params = EncoderParams::init(tiny_config().encoder, 9).unwrap();
    save_encoder(dir.path(), &params, 9, 0.5).unwrap();
    let back = load_encoder(dir.path()).unwrap();
    assert_eq!(back.config, params.config);
    for ((name, a), (_, b)) in params.named().into_iter().zip(back.named()) {
        let rounded: Vec<f64> = a.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(rounded, b.data(), "{name}");
    }
}

#[test]
fn augmented_views_keep_the_shape() {
    let p = &stripes(1, 16, 3)[0];
    let (a, b) = gtp_core::contrastive::augment_pair(p, &AugmentationConfig::default(), 4);
    assert_eq!((a.height, a.width, a.data.len()), (16, 16, 16 * 16 * 3));
    assert_eq!(b.data.len(), a.data.len());
}
