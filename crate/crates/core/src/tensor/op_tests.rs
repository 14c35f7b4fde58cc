use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{finite_diff_grad, max_rel_err, probe_loss, probe_weights, DEFAULT_H};
use crate::tensor::{multi_head_attention, NodeId, Tape, Tensor};

/// Exactly representable values keep FD noise well under the tolerances.
fn dyadic_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    const VALS: [f32; 10] = [-1.25, -1.0, -0.75, -0.5, -0.25, 0.25, 0.5, 0.75, 1.0, 1.25];
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| VALS[rng.random_range(0..VALS.len())]).collect();
    Tensor::new(shape, data).unwrap()
}

fn check_grads<B>(inputs: &[Tensor], build: B, tol: f64)
where
    B: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let weights = probe_weights(tape.value(out).numel(), 1234);
    tape.backward_seeded(out, weights.clone());

    for which in 0..inputs.len() {
        let analytic = tape.grad(ids[which]).expect("no gradient reached input").to_vec();
        let numeric = finite_diff_grad(
            |xs| {
                let mut t2 = Tape::new();
                let ids2: Vec<NodeId> = xs.iter().map(|t| t2.param_owned(t.clone())).collect();
                let out2 = build(&mut t2, &ids2);
                probe_loss(t2.value(out2), &weights)
            },
            inputs,
            which,
            DEFAULT_H,
        );
        let err = max_rel_err(&analytic, &numeric, 1e-2);
        assert!(err < tol, "input {}: rel err {:.3e} >= {:.1e}", which, err, tol);
    }
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = tape.matmul(i, b);
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_arithmetic() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_panics() {
    let result = std::panic::catch_unwind(|| {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        tape.matmul(a, b);
    });
    assert!(result.is_err());
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = dyadic_tensor(&mut rng, &[3, 4]);
    let b = dyadic_tensor(&mut rng, &[4, 2]);
    check_grads(&[a, b], |t, ids| t.matmul(ids[0], ids[1]), 1e-4);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = dyadic_tensor(&mut rng, &[3, 4]);
    let w = dyadic_tensor(&mut rng, &[4, 3]);
    let b = dyadic_tensor(&mut rng, &[3]);
    check_grads(&[x, w, b], |t, ids| t.linear(ids[0], ids[1], ids[2]), 1e-4);
}

#[test]
fn softmax_uniform_on_equal_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax_last(x);
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn softmax_is_stable_under_huge_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1000.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax_last(x);
    let out = tape.value(y).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-6);
    assert!(out[1].abs() < 1e-6 && out[2].abs() < 1e-6);
}

#[test]
fn softmax_closed_form_values() {
    // Independent closed-form evaluation in f64.
    let logits = [1.0f64, 2.0, 3.0];
    let denom: f64 = logits.iter().map(|v| v.exp()).sum();
    let expected: Vec<f64> = logits.iter().map(|v| v.exp() / denom).collect();

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax_last(x);
    for (got, want) in tape.value(y).data().iter().zip(&expected) {
        assert!((*got as f64 - want).abs() < 1e-6, "{} vs {}", got, want);
    }
    // Spot values: 0.09003057, 0.24472847, 0.66524096.
    assert!((tape.value(y).data()[0] - 0.09003057).abs() < 1e-6);
    assert!((tape.value(y).data()[2] - 0.66524096).abs() < 1e-6);
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = dyadic_tensor(&mut rng, &[4, 5]);
    check_grads(&[x], |t, ids| t.softmax_last(ids[0]), 1e-3);
}

#[test]
fn layer_norm_zeroes_constant_rows() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 4], vec![5.0; 8]).unwrap());
    let g = tape.leaf(Tensor::new(&[4], vec![1.0; 4]).unwrap());
    let b = tape.leaf(Tensor::new(&[4], vec![0.0; 4]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-5);
    for &v in tape.value(y).data() {
        assert!(v.abs() < 1e-6);
    }
}

#[test]
fn layer_norm_two_point_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    let g = tape.leaf(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-12);
    let out = tape.value(y).data();
    assert!((out[0] - 1.0).abs() < 1e-5);
    assert!((out[1] + 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = dyadic_tensor(&mut rng, &[3, 6]);
    let g = dyadic_tensor(&mut rng, &[6]);
    let b = dyadic_tensor(&mut rng, &[6]);
    check_grads(&[x, g, b], |t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5), 1e-3);
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = dyadic_tensor(&mut rng, &[5, 4]);
    let g = dyadic_tensor(&mut rng, &[4]);
    let b = dyadic_tensor(&mut rng, &[4]);
    check_grads(&[x, g, b], |t, ids| t.batch_norm_cols(ids[0], ids[1], ids[2], 1e-5).0, 1e-3);
}

#[test]
fn batch_norm_reports_column_stats() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap());
    let g = tape.leaf(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let (_, mean, var) = tape.batch_norm_cols(x, g, b, 1e-5);
    assert_eq!(mean, vec![2.0, 15.0]);
    assert_eq!(var, vec![1.0, 25.0]);
}

#[test]
fn affine_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = dyadic_tensor(&mut rng, &[4, 3]);
    let g = dyadic_tensor(&mut rng, &[3]);
    let b = dyadic_tensor(&mut rng, &[3]);
    check_grads(
        &[x, g, b],
        |t, ids| {
            t.affine_norm_cols(ids[0], vec![0.5, -0.25, 0.0], vec![1.0, 2.0, 0.5], ids[1], ids[2], 1e-5)
        },
        1e-3,
    );
}

#[test]
fn gelu_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = dyadic_tensor(&mut rng, &[3, 4]);
    check_grads(&[x], |t, ids| t.gelu(ids[0]), 1e-3);
}

#[test]
fn softplus_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = dyadic_tensor(&mut rng, &[2, 5]);
    check_grads(&[x], |t, ids| t.softplus(ids[0]), 1e-3);
}

#[test]
fn softplus_is_stable_at_extremes() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![-100.0, 0.0, 100.0]).unwrap());
    let y = tape.softplus(x);
    let out = tape.value(y).data();
    assert!(out[0].abs() < 1e-6);
    assert!((out[1] - std::f32::consts::LN_2).abs() < 1e-6);
    assert!((out[2] - 100.0).abs() < 1e-4);
}

#[test]
fn l2_normalize_produces_unit_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = dyadic_tensor(&mut rng, &[4, 8]);
    let mut tape = Tape::new();
    let id = tape.leaf(x);
    let y = tape.l2_normalize_rows(id, 1e-12);
    let t = tape.value(y);
    for i in 0..4 {
        let norm: f64 =
            t.data()[i * 8..(i + 1) * 8].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

#[test]
fn l2_normalize_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = dyadic_tensor(&mut rng, &[3, 5]);
    check_grads(&[x], |t, ids| t.l2_normalize_rows(ids[0], 1e-12), 1e-3);
}

#[test]
fn l2_distance_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = dyadic_tensor(&mut rng, &[6]);
    let b = dyadic_tensor(&mut rng, &[6]);
    check_grads(&[a, b], |t, ids| t.l2_distance(ids[0], ids[1], 1e-12), 1e-3);
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = dyadic_tensor(&mut rng, &[4, 3]);
    check_grads(&[x], |t, ids| t.cross_entropy_rows(ids[0], &[0, 2, 1, 2]), 1e-3);
}

#[test]
fn slice_and_concat_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = dyadic_tensor(&mut rng, &[4, 6]);
    check_grads(
        &[x],
        |t, ids| {
            let a = t.slice_rows(ids[0], 0, 2);
            let b = t.slice_rows(ids[0], 2, 4);
            let cat = t.concat_rows(&[b, a]);
            let left = t.slice_cols(cat, 0, 3);
            let right = t.slice_cols(cat, 3, 6);
            t.concat_cols(&[right, left])
        },
        1e-3,
    );
}

#[test]
fn reduction_and_broadcast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = dyadic_tensor(&mut rng, &[4, 3]);
    let b = dyadic_tensor(&mut rng, &[3]);
    check_grads(
        &[x, b],
        |t, ids| {
            let y = t.add_bias(ids[0], ids[1]);
            let m = t.mean_rows(y);
            let s = t.sum_all(m);
            let u = t.mean_all(y);
            let d = t.sub(s, u);
            let tr = t.transpose(y);
            let z = t.mean_all(tr);
            let zz = t.add(d, z);
            let sc = t.scale(zz, 0.5);
            let sp = t.mul(sc, sc);
            t.mean_scalars(&[sp, sc, d])
        },
        1e-3,
    );
}

#[test]
fn attention_single_position_returns_value_row() {
    // With one token the attention weights collapse to 1, so the output is
    // exactly the value vector.
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let q = dyadic_tensor(&mut rng, &[1, 8]);
    let k = dyadic_tensor(&mut rng, &[1, 8]);
    let v = dyadic_tensor(&mut rng, &[1, 8]);
    let mut tape = Tape::new();
    let (qi, ki, vi) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
    let out = multi_head_attention(&mut tape, qi, ki, vi, 2, None);
    assert_eq!(tape.value(out).data(), v.data());
}

#[test]
fn attention_causal_mask_keeps_first_position_on_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let q = dyadic_tensor(&mut rng, &[2, 4]);
    let k = dyadic_tensor(&mut rng, &[2, 4]);
    let v = dyadic_tensor(&mut rng, &[2, 4]);
    let mut tape = Tape::new();
    let (qi, ki, vi) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
    let mask = tape.leaf(Tensor::new(&[2, 2], vec![0.0, -1e9, 0.0, 0.0]).unwrap());
    let out = multi_head_attention(&mut tape, qi, ki, vi, 2, Some(mask));
    let got = tape.value(out);
    for j in 0..4 {
        assert!((got.data()[j] - v.data()[j]).abs() < 1e-6, "col {}", j);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let q = dyadic_tensor(&mut rng, &[3, 8]);
    let k = dyadic_tensor(&mut rng, &[3, 8]);
    let v = dyadic_tensor(&mut rng, &[3, 8]);
    check_grads(
        &[q, k, v],
        |t, ids| multi_head_attention(t, ids[0], ids[1], ids[2], 2, None),
        1e-3,
    );
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::randn(&mut rng, &[6, 6], 1.0);
        let w = Tensor::randn(&mut rng, &[6, 6], 0.3);
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(x), tape.leaf(w));
        let y = tape.matmul(xi, wi);
        let s = tape.softmax_last(y);
        let g = tape.gelu(s);
        tape.value(g).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_through_frozen_side_skips_its_gradient() {
    let mut tape = Tape::new();
    let x = tape.param_owned(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.leaf(Tensor::new(&[2, 2], vec![0.5, -0.5, 1.0, 0.25]).unwrap());
    let y = tape.matmul(x, w);
    let s = tape.sum_all(y);
    tape.backward(s);
    assert!(tape.grad(x).is_some());
    assert!(tape.grad(w).is_none());
}

#[test]
#[ignore = "throughput probe, run with --nocapture"]
fn benchmark_matmul_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, k, n) in &[(33usize, 128usize, 128usize), (17, 64, 64), (64, 128, 512), (128, 128, 128)] {
        let a = Tensor::randn(&mut rng, &[m, k], 1.0);
        let b = Tensor::randn(&mut rng, &[k, n], 1.0);
        let reps = (200_000_000 / (m * k * n)).max(1);
        let start = std::time::Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let out = super::ops::matmul_raw(a.data(), b.data(), m, k, n);
            sink += out[0];
        }
        let dt = start.elapsed().as_secs_f64();
        let gmacs = (reps * m * k * n) as f64 / dt / 1e9;
        println!("matmul {}x{}x{}: {:.2} GMAC/s (sink {})", m, k, n, gmacs, sink);
    }
}
