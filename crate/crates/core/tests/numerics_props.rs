use gtp_core::numerics::{grad_check, softmax_rows, Tape, Tensor, Var};
use gtp_core::rng;
use gtp_core::Result;
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand(seed: u64, salt: u64, shape: &[usize]) -> Tensor {
    rng::normal_tensor(&mut rng::stream(seed, salt), shape, 1.0)
}

/// Reduces any output to a scalar through a fixed random weighting so every
/// entry of the output gradient is exercised.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(rand(seed, 999, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(seed: u64, leaves: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        },
        leaves,
        H,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_and_transpose(seed in any::<u64>()) {
        check(seed, &[rand(seed, 1, &[4, 5]), rand(seed, 2, &[3, 5])], |t, v| {
            let bt = t.transpose(v[1])?;
            t.matmul(v[0], bt)
        });
    }

    #[test]
    fn elementwise(seed in any::<u64>()) {
        let leaves = [rand(seed, 1, &[3, 4]), rand(seed, 2, &[3, 4]), rand(seed, 3, &[1, 4])];
        check(seed, &leaves, |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            let r = t.add_row(m, v[2])?;
            t.scale(r, -1.7)
        });
    }

    #[test]
    fn div_by_scalar(seed in any::<u64>()) {
        let leaves = [rand(seed, 1, &[2, 3]), Tensor::scalar(1.5 + rand(seed, 2, &[1]).data()[0].abs())];
        check(seed, &leaves, |t, v| t.div_by_scalar(v[0], v[1]));
    }

    #[test]
    fn relu_chain(seed in any::<u64>()) {
        check(seed, &[rand(seed, 1, &[3, 4]), rand(seed, 2, &[4, 2])], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            t.relu(m)
        });
    }

    #[test]
    fn gelu(seed in any::<u64>()) {
        check(seed, &[rand(seed, 1, &[3, 5])], |t, v| t.gelu(v[0]));
    }

    #[test]
    fn softmax(seed in any::<u64>()) {
        check(seed, &[rand(seed, 1, &[3, 6])], |t, v| t.softmax_rows(v[0]));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = rand(seed, 1, &[4, 7]).map(|v| v * scale);
        let s = softmax_rows(&x);
        for r in 0..4 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layernorm(seed in any::<u64>()) {
        let leaves = [rand(seed, 1, &[3, 8]), rand(seed, 2, &[8]), rand(seed, 3, &[8])];
        check(seed, &leaves, |t, v| t.layernorm(v[0], v[1], v[2]));
    }

    #[test]
    fn concat_and_slice(seed in any::<u64>()) {
        let leaves = [rand(seed, 1, &[2, 3]), rand(seed, 2, &[4, 3]), rand(seed, 3, &[6, 2])];
        check(seed, &leaves, |t, v| {
            let rows = t.concat_rows(&[v[0], v[1]])?;
            let cols = t.concat_cols(&[rows, v[2]])?;
            let s = t.slice_rows(cols, 1, 4)?;
            t.slice_cols(s, 2, 3)
        });
    }

    #[test]
    fn means_and_reductions(seed in any::<u64>()) {
        check(seed, &[rand(seed, 1, &[4, 4])], |t, v| {
            let m0 = t.mean_over_axis(v[0], 0)?;
            let m1 = t.mean_over_axis(v[0], 1)?;
            let m1t = t.transpose(m1)?;
            let a = t.add(m0, m1t)?;
            let tr = t.trace(v[0])?;
            let fr = t.frobenius_norm(v[0])?;
            let s = t.sum(a)?;
            let x = t.add(s, tr)?;
            t.mul(x, fr)
        });
    }

    #[test]
    fn l2_normalize(seed in any::<u64>()) {
        check(seed, &[rand(seed, 1, &[3, 4])], |t, v| t.l2_normalize_rows(v[0]));
    }

    #[test]
    fn cross_entropy(seed in any::<u64>(), exclude in any::<bool>()) {
        check(seed, &[rand(seed, 1, &[4, 4])], |t, v| t.cross_entropy_rows(v[0], &[1, 0, 3, 2], exclude));
    }

    #[test]
    fn conv_and_pool(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let leaves = [rand(seed, 1, &[2, 2, 5, 5]), rand(seed, 2, &[3, 2, 3, 3]), rand(seed, 3, &[3])];
        check(seed, &leaves, |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            let p = t.global_avg_pool(c)?;
            let cs = t.sum(c)?;
            let ps = t.sum(p)?;
            t.add(cs, ps)
        });
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(rand(seed, 1, &[3, 5]));
            let b = t.leaf(rand(seed, 2, &[5, 5]));
            let m = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(m).unwrap();
            let l = t.sum(s).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(s).clone(), g.get_or_zeros(b))
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn quoted_matmul_example_passes_at_tight_tolerance() {
    let leaves = [rand(7, 1, &[4, 5]), rand(7, 2, &[5, 3])];
    let report = grad_check(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            t.sum(m)
        },
        &leaves,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err);
}

#[test]
fn layernorm_example_at_1e5() {
    let leaves = [rand(3, 1, &[3, 8]), Tensor::full(&[8], 1.0), Tensor::zeros(&[8])];
    let report = grad_check(
        |t, v| {
            let y = t.layernorm(v[0], v[1], v[2])?;
            project(t, y, 3)
        },
        &leaves,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sparse_matmul(seed in any::<u64>()) {
        use std::sync::Arc;
        use gtp_core::numerics::SparseMatrix;
        let dense = rand(seed, 5, &[4, 3]);
        let triplets = (0..4)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .filter(|&(r, c)| (r + c + seed as usize) % 3 != 0)
            .map(|(r, c)| (r, c, dense.get(r, c)))
            .collect();
        let m = Arc::new(SparseMatrix::from_triplets(4, 3, triplets).unwrap());
        check(seed, &[rand(seed, 1, &[3, 2])], |t, v| t.spmm(&m, v[0]));
    }
}
