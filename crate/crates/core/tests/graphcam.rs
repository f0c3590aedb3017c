use gtp_core::checkpoint::NamedParams;
use gtp_core::graph::{build_adjacency, Connectivity};
use gtp_core::graphcam::{
    attention_relevance, binarize_and_iou, default_thresholds, graphcam, output_relevance, reconstruct_heatmap,
    relevance_product, reverse_pool, transformer_relevance, weighted_attention, write_heatmap, BlockRelevance,
    HeatmapSidecar,
};
use gtp_core::io::read_pgm;
use gtp_core::model::{forward, infer, AttentionOverride, GraphInput, GtpConfig, GtpParams};
use gtp_core::numerics::{rel_err, Tensor};
use gtp_core::rng;
use proptest::prelude::*;

fn grid(rows: i32, cols: i32) -> Vec<(i32, i32)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
}

fn input(seed: u64, dim: usize) -> GraphInput {
    let coords = grid(3, 3);
    let edges = build_adjacency(&coords, Connectivity::Eight).unwrap();
    GraphInput::new(rng::normal_tensor(&mut rng::stream(seed, 1), &[9, dim], 1.0), &edges).unwrap()
}

fn params(seed: u64, blocks: usize, heads: usize) -> GtpParams {
    let mut p = GtpParams::init(GtpConfig {
        feature_dim: 5,
        hidden_dim: 6,
        gc_layers: 2,
        blocks,
        heads,
        transformer_dim: 4,
        mlp_dim: 6,
        pooled_nodes: 3,
        seed,
        ..GtpConfig::default()
    })
    .unwrap();
    let mut r = rng::stream(seed, 77);
    for t in p.tensors_mut() {
        let noise = rng::normal_tensor(&mut r, t.shape(), 0.5);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    p
}

fn logit_with(p: &GtpParams, x: &GraphInput, block: usize, head: usize, a: &Tensor, target: usize) -> f64 {
    let o = AttentionOverride {
        block,
        head,
        attention: a.clone(),
    };
    forward(p, x, false, Some(&o)).unwrap().logits()[target]
}

fn check_attention_gradient(p: &GtpParams, x: &GraphInput, target: usize) {
    let mut trace = forward(p, x, true, None).unwrap();
    let rel = attention_relevance(&mut trace, p, target).unwrap();
    let h = 1e-6;
    for (l, block) in rel.iter().enumerate() {
        for (head, grad) in block.grad.iter().enumerate() {
            let a = trace.attention(l, head).clone();
            for i in 0..a.len() {
                let mut plus = a.clone();
                plus.data_mut()[i] += h;
                let mut minus = a.clone();
                minus.data_mut()[i] -= h;
                let fd = (logit_with(p, x, l, head, &plus, target) - logit_with(p, x, l, head, &minus, target)) / (2.0 * h);
                let err = rel_err(grad.data()[i], fd);
                assert!(err < 1e-4, "block {l} head {head} entry {i}: {} vs {fd}", grad.data()[i]);
            }
        }
    }
}

#[test]
fn attention_gradient_matches_finite_differences_on_a_toy_model() {
    check_attention_gradient(&params(1, 1, 1), &input(1, 5), 0);
}

#[test]
fn attention_gradient_matches_finite_differences_across_blocks_and_heads() {
    for target in 0..3 {
        check_attention_gradient(&params(2, 2, 2), &input(2, 5), target);
    }
}

#[test]
fn zero_readout_has_zero_attention_gradient() {
    let mut p = params(3, 2, 2);
    p.head_w = Tensor::zeros(&[4, 3]);
    let mut trace = forward(&p, &input(3, 5), true, None).unwrap();
    for block in attention_relevance(&mut trace, &p, 1).unwrap() {
        assert!(block.grad.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn relevance_starts_as_one_hot() {
    let r = output_relevance(2);
    assert_eq!(r.data(), &[0.0, 0.0, 1.0]);
    assert_eq!(r.sum(), 1.0);
}

#[test]
fn target_out_of_range() {
    let p = params(4, 1, 1);
    let mut trace = forward(&p, &input(4, 5), true, None).unwrap();
    assert!(attention_relevance(&mut trace, &p, 3).is_err());
}

#[test]
fn identity_chain() {
    let zero = BlockRelevance {
        grad: vec![Tensor::zeros(&[4, 4])],
        relevance: vec![Tensor::full(&[4, 4], 2.0)],
    };
    let (c_t, _) = transformer_relevance(&[zero], true).unwrap();
    assert_eq!(c_t, Tensor::eye(4));
    assert!(c_t.row(0)[1..].iter().all(|&v| v == 0.0));
    let s = Tensor::full(&[5, 3], 1.0 / 3.0);
    let c_g = reverse_pool(&c_t, &s).unwrap();
    let map = reconstruct_heatmap(&c_g, &grid(1, 5), 1, 5).unwrap();
    assert!(map.cells.iter().all(|&v| v == 0.0));
}

#[test]
fn product_order_is_first_block_leftmost() {
    let a1 = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
    let a2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 1.0]]).unwrap();
    let got = relevance_product(&[a1, a2]).unwrap();
    // [[1,2],[0,1]]·[[1,0],[3,1]] = [[7,2],[3,1]]
    assert_eq!(got.data(), &[7.0, 2.0, 3.0, 1.0]);
}

#[test]
fn clamp_flag_selects_the_positive_part() {
    let b = BlockRelevance {
        grad: vec![Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap(), Tensor::full(&[2, 2], 1.0)],
        relevance: vec![Tensor::full(&[2, 2], 1.0), Tensor::from_rows(&[vec![0.0, -4.0], vec![0.0, 2.0]]).unwrap()],
    };
    let clamped = weighted_attention(&b, true);
    assert_eq!(clamped.data(), &[1.5, 0.0, 1.0, 2.25]);
    let raw = weighted_attention(&b, false);
    assert_eq!(raw.data(), &[1.5, -2.5, 1.0, 2.25]);
}

#[test]
fn reverse_pool_examples() {
    let mut c_t = Tensor::eye(3);
    c_t.set(0, 1, 0.25);
    c_t.set(0, 2, 0.75);
    assert_eq!(reverse_pool(&c_t, &Tensor::eye(2)).unwrap(), vec![0.25, 0.75]);
    let hard = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert_eq!(reverse_pool(&c_t, &hard).unwrap(), vec![0.25, 0.75, 0.75, 0.25]);
    let uniform = Tensor::full(&[4, 2], 0.5);
    assert_eq!(reverse_pool(&c_t, &uniform).unwrap(), vec![0.5; 4]);
    assert!(reverse_pool(&c_t, &Tensor::eye(3)).is_err());
}

proptest! {
    #[test]
    fn relabeling_clusters_changes_nothing(seed in any::<u64>(), nt in 1usize..6) {
        let mut r = rng::stream(seed, 0);
        let c_t = rng::normal_tensor(&mut r, &[nt + 1, nt + 1], 1.0);
        let s = rng::normal_tensor(&mut r, &[7, nt], 1.0);
        let perm = rng::permutation(&mut r, nt);
        let mut c_p = c_t.clone();
        let mut s_p = s.clone();
        for (new, &old) in perm.iter().enumerate() {
            c_p.set(0, new + 1, c_t.get(0, old + 1));
            for i in 0..7 {
                s_p.set(i, new, s.get(i, old));
            }
        }
        let a = reverse_pool(&c_t, &s).unwrap();
        let b = reverse_pool(&c_p, &s_p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_attention_diagonal_at_least_one(seed in any::<u64>()) {
        let mut r = rng::stream(seed, 0);
        let b = BlockRelevance {
            grad: (0..3).map(|_| rng::normal_tensor(&mut r, &[4, 4], 1.0)).collect(),
            relevance: (0..3).map(|_| rng::normal_tensor(&mut r, &[4, 4], 1.0)).collect(),
        };
        let a = weighted_attention(&b, true);
        for i in 0..4 {
            prop_assert!(a.get(i, i) >= 1.0);
        }
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn heatmap_examples() {
    let coords = grid(2, 2);
    let map = reconstruct_heatmap(&[4.0, 2.0, 0.0, 0.0], &coords, 2, 2).unwrap();
    assert_eq!(map.cells, vec![1.0, 0.5, 0.0, 0.0]);
    let map = reconstruct_heatmap(&[3.0, 3.0], &[(0, 0), (1, 1)], 2, 2).unwrap();
    assert_eq!(map.cells, vec![1.0, 0.0, 0.0, 1.0]);
    let map = reconstruct_heatmap(&[0.0; 4], &coords, 2, 2).unwrap();
    assert!(map.cells.iter().all(|&v| v == 0.0));
    assert!(reconstruct_heatmap(&[1.0], &[(2, 0)], 2, 2).is_err());

    let map = reconstruct_heatmap(&[4.0, 2.0, 0.0, 0.0], &coords, 2, 2).unwrap();
    let px = map.upsample(2, 2, 5, 4);
    assert_eq!(&px[..4], &[1.0, 1.0, 0.5, 0.5]);
    assert_eq!(&px[16..], &[0.0; 4]);
}

#[test]
fn iou_examples() {
    let truth = vec![true, true, false, false];
    let r = binarize_and_iou(&[0.9, 0.9, 0.0, 0.0], &truth, &default_thresholds()).unwrap();
    assert!(r.iou.iter().all(|&v| v == 1.0));
    assert_eq!(r.argmax_threshold, 0.1);
    let r = binarize_and_iou(&[0.0, 0.0, 1.0, 1.0], &truth, &[0.5]).unwrap();
    assert_eq!(r.max_iou, 0.0);

    // Left half predicted, left two-thirds true, on a 6-pixel strip.
    let pred = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    let truth = [true, true, true, true, false, false];
    let r = binarize_and_iou(&pred, &truth, &[0.5]).unwrap();
    assert!((r.max_iou - 0.75).abs() < 1e-15);

    let r = binarize_and_iou(&[0.0, 0.0], &[false, false], &[0.5]).unwrap();
    assert_eq!(r.max_iou, 1.0);
    assert!(binarize_and_iou(&[0.0], &[false, false], &[0.5]).is_err());
}

#[test]
fn heatmaps_are_reproducible_and_written_exactly() {
    let p = params(5, 2, 2);
    let x = input(5, 5);
    let run = || {
        let (probs, mut trace) = infer(&p, &x).unwrap();
        let target = (0..3).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        let rel = graphcam(&mut trace, &p, target, true).unwrap();
        assert!(rel.c_g.iter().all(|&v| v >= 0.0));
        (rel.c_g.clone(), reconstruct_heatmap(&rel.c_g, &grid(3, 3), 3, 3).unwrap(), target, rel.class_probability)
    };
    let (a, map, target, prob) = run();
    let (b, map_b, ..) = run();
    assert_eq!(a, b);
    assert_eq!(map, map_b);

    let dir = tempfile::tempdir().unwrap();
    let px = map.upsample(4, 4, 12, 12);
    let sidecar = HeatmapSidecar {
        slide_id: "s".into(),
        target_class: target,
        class_probability: prob,
        max_iou: None,
        argmax_threshold: None,
        config: serde_json::Value::Null,
    };
    write_heatmap(dir.path(), "s_heatmap", &px, 12, 12, None, &sidecar).unwrap();
    let (w, h, gray) = read_pgm(&dir.path().join("s_heatmap.pgm")).unwrap();
    assert_eq!((w, h), (12, 12));
    for (g, v) in gray.iter().zip(&px) {
        assert_eq!(*g, (255.0 * v).round() as u8);
    }
    assert!(dir.path().join("s_heatmap.png").exists());
}

#[test]
fn literal_variant_runs_without_clamp() {
    let p = params(6, 2, 2);
    let (_, mut trace) = infer(&p, &input(6, 5)).unwrap();
    let rel = graphcam(&mut trace, &p, 0, false).unwrap();
    assert_eq!(rel.c_g.len(), 9);
    let map = reconstruct_heatmap(&rel.c_g, &grid(3, 3), 3, 3).unwrap();
    assert!(map.cells.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
