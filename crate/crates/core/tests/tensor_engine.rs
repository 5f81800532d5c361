mod common;

use common::{grad_check, random_tensor, rng};
use dcacrn::tensor::{
    cross_entropy_with_l2, lstm_step, Adam, AdamConfig, BatchNormState, LstmVars, ParamStore, Tape, Tensor,
};
use dcacrn::{Error, ErrorKind};
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a = random_tensor(&[3, 3], &mut rng(1));
    let av = tape.constant(a.clone());
    let out = tape.matmul(eye, av).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let ones = tape.constant(t(&[2, 1], &[1., 1.]));
    let y = tape.matmul(x, ones).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4, 2], &mut r);
    // Plain sum(A×B) as in the op's own example.
    let mut tape = Tape::new();
    let av = tape.variable(a.clone());
    let bv = tape.constant(b.clone());
    let prod = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    for i in 0..a.len() {
        let f = |delta: f64| {
            let mut a2 = a.clone();
            a2.data_mut()[i] += delta;
            let mut tp = Tape::new();
            let x = tp.constant(a2);
            let y = tp.constant(b.clone());
            let p = tp.matmul(x, y).unwrap();
            tp.value(p).data().iter().sum::<f64>()
        };
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        assert!(common::rel_err(grads.get(av).unwrap()[i], numeric) < 1e-6);
    }
    // Batched form with both inputs differentiated.
    let a = random_tensor(&[2, 3, 4], &mut r);
    let b = random_tensor(&[2, 4, 5], &mut r);
    assert!(grad_check(&[a, b], |tp, v| tp.matmul(v[0], v[1])) < GRAD_TOL);
}

#[test]
fn conv_identity_kernel() {
    let input = random_tensor(&[1, 4, 5], &mut rng(3));
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv_width_33_kernel_8_stride_2_gives_13() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 33]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 1, 8]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, (1, 2)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 13]);
}

#[test]
fn conv_all_ones_kernel_gives_window_sums() {
    let input = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
    // brute-force window sums
    let mut expected = Vec::new();
    for r in 0..2 {
        for c in 0..2 {
            let mut s = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    s += input.at(&[0, r + dr, c + dc]);
                }
            }
            expected.push(s);
        }
    }
    assert_eq!(expected, vec![12.0, 16.0, 24.0, 28.0]);
    assert_eq!(tape.value(y).data(), expected.as_slice());
}

#[test]
fn conv_kernel_larger_than_input_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, k, b, (1, 1)), Err(Error::Dimension(_))));
}

#[test]
fn conv_output_extent_formula_exhaustive() {
    // Oracle: count placements directly.
    let placements = |extent: usize, k: usize, s: usize| (0..extent).filter(|p| p % s == 0 && p + k <= extent).count();
    for h in 1..=10 {
        for w in 1..=10 {
            for kh in 1..=h {
                for kw in 1..=w {
                    for sh in 1..=3 {
                        for sw in 1..=3 {
                            let mut tape = Tape::new();
                            let x = tape.constant(Tensor::zeros(&[1, h, w]));
                            let k = tape.constant(Tensor::zeros(&[1, 1, kh, kw]));
                            let b = tape.constant(Tensor::zeros(&[1]));
                            let y = tape.conv2d(x, k, b, (sh, sw)).unwrap();
                            assert_eq!(
                                tape.shape(y),
                                &[1, placements(h, kh, sh), placements(w, kw, sw)],
                                "h={h} w={w} k=({kh},{kw}) s=({sh},{sw})"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let x = random_tensor(&[2, 2, 5, 6], &mut r);
    let k = random_tensor(&[3, 2, 2, 3], &mut r);
    let b = random_tensor(&[3], &mut r);
    for stride in [(1, 1), (1, 2), (2, 2)] {
        let err = grad_check(&[x.clone(), k.clone(), b.clone()], |tp, v| tp.conv2d(v[0], v[1], v[2], stride));
        assert!(err < GRAD_TOL, "stride {stride:?}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 5]));
    let p = tape.softmax_rows(z).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let x = tape.constant(t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let p = tape.softmax_rows(x).unwrap();
    for (got, want) in tape.value(p).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((got - want).abs() < 1e-15);
    }

    let row = random_tensor(&[2, 4], &mut rng(5));
    let shifted = Tensor::new(vec![2, 4], row.data().iter().map(|v| v + 17.5).collect()).unwrap();
    let a = tape.constant(row);
    let b = tape.constant(shifted);
    let pa = tape.softmax_rows(a).unwrap();
    let pb = tape.softmax_rows(b).unwrap();
    assert!(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-12);
}

#[test]
fn softmax_nan_is_numeric_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[0.0, f64::NAN]));
    let err = tape.softmax_rows(x).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numeric);
}

#[test]
fn softmax_gradient() {
    let x = random_tensor(&[3, 4], &mut rng(6));
    assert!(grad_check(&[x], |tp, v| tp.softmax_rows(v[0])) < GRAD_TOL);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, n], row).unwrap());
        let p = tape.softmax_rows(x).unwrap();
        let v = tape.value(p).data();
        prop_assert!(v.iter().all(|&e| e >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 4], 3.0));
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(c, Some(g), Some(b), 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, Some(g), Some(b), 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

    let r = random_tensor(&[3, 2, 5], &mut rng(7));
    let x = tape.constant(r);
    let y = tape.layer_norm(x, None, None, 0.0).unwrap();
    for sample in tape.value(y).data().chunks(10) {
        let mean = sample.iter().sum::<f64>() / 10.0;
        let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(8);
    let x = random_tensor(&[2, 3, 4], &mut r);
    let g = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[3, 4], &mut r);
    assert!(grad_check(&[x.clone(), g, b], |tp, v| tp.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)) < GRAD_TOL);
    assert!(grad_check(&[x], |tp, v| tp.layer_norm(v[0], None, None, 1e-5)) < GRAD_TOL);
}

#[test]
fn batch_norm_examples() {
    let state = BatchNormState::new(2);
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));

    let x = tape.constant(Tensor::full(&[1, 2, 3], 4.0));
    let (y, _) = tape.batch_norm(x, g, b, &state, true).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(random_tensor(&[4, 2, 3], &mut rng(9)));
    let (y, stats) = tape.batch_norm(x, g, b, &state, true).unwrap();
    assert!(stats.is_some());
    let v = tape.value(y);
    for ch in 0..2 {
        let mut s = 0.0;
        for n in 0..4 {
            for k in 0..3 {
                s += v.at(&[n, ch, k]);
            }
        }
        assert!((s / 12.0).abs() < 1e-9);
    }
}

#[test]
fn batch_norm_eval_has_no_batch_dependence() {
    let mut state = BatchNormState::new(2);
    let mut r = rng(10);
    // fold in some training statistics first
    {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(random_tensor(&[5, 2, 3], &mut r));
        let (_, stats) = tape.batch_norm(x, g, b, &state, true).unwrap();
        state.update(&stats.unwrap());
    }
    let shared = random_tensor(&[1, 2, 3], &mut r);
    let other1 = random_tensor(&[1, 2, 3], &mut r);
    let other2 = Tensor::full(&[1, 2, 3], 100.0);
    let batch = |o: &Tensor| {
        let mut d = shared.data().to_vec();
        d.extend_from_slice(o.data());
        Tensor::new(vec![2, 2, 3], d).unwrap()
    };
    let mut tape = Tape::new();
    let g = tape.constant(t(&[2], &[1.5, -0.5]));
    let b = tape.constant(t(&[2], &[0.1, 0.2]));
    let x1 = tape.constant(batch(&other1));
    let x2 = tape.constant(batch(&other2));
    let (y1, s1) = tape.batch_norm(x1, g, b, &state, false).unwrap();
    let (y2, _) = tape.batch_norm(x2, g, b, &state, false).unwrap();
    assert!(s1.is_none());
    assert_eq!(&tape.value(y1).data()[..6], &tape.value(y2).data()[..6]);
}

#[test]
fn batch_norm_gradient_both_modes() {
    let mut r = rng(11);
    let x = random_tensor(&[3, 2, 2, 3], &mut r);
    let g = random_tensor(&[2], &mut r);
    let b = random_tensor(&[2], &mut r);
    let mut state = BatchNormState::new(2);
    state.running_mean = vec![0.3, -0.2];
    state.running_var = vec![0.7, 1.9];
    for training in [true, false] {
        let err = grad_check(&[x.clone(), g.clone(), b.clone()], |tp, v| {
            tp.batch_norm(v[0], v[1], v[2], &state, training).map(|(y, _)| y)
        });
        assert!(err < GRAD_TOL, "training={training}: {err}");
    }
}

#[test]
fn running_stats_use_momentum() {
    let mut state = BatchNormState::new(1);
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let x = tape.constant(t(&[2, 1, 1], &[1.0, 3.0]));
    let (_, stats) = tape.batch_norm(x, g, b, &state, true).unwrap();
    state.update(&stats.unwrap());
    assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
    // unbiased variance of {1, 3} is 2
    assert!((state.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
}

#[test]
fn relu_and_dropout() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut r = rng(12);
    let z = tape.constant(random_tensor(&[50], &mut r));
    for training in [true, false] {
        let d = tape.dropout(z, 0.0, training, &mut r).unwrap();
        assert_eq!(tape.value(d), tape.value(z));
    }
    let e = tape.dropout(z, 0.5, false, &mut r).unwrap();
    assert_eq!(tape.value(e), tape.value(z));
    assert_eq!(tape.dropout(z, 1.0, true, &mut r).unwrap_err().kind(), ErrorKind::Config);

    let ones = tape.constant(Tensor::ones(&[10_000]));
    let d = tape.dropout(ones, 0.5, true, &mut r).unwrap();
    let mean = tape.value(d).data().iter().sum::<f64>() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(13);
    let a = random_tensor(&[2, 3], &mut r);
    let b = random_tensor(&[2, 3], &mut r);
    assert!(grad_check(&[a.clone(), b.clone()], |tp, v| tp.mul(v[0], v[1])) < GRAD_TOL);
    assert!(grad_check(&[a.clone(), b], |tp, v| tp.add(v[0], v[1])) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| Ok(tp.sigmoid(v[0]))) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| Ok(tp.tanh(v[0]))) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| Ok(tp.relu(v[0]))) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| Ok(tp.sum_squares(v[0]))) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| tp.transpose_last2(v[0])) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| tp.narrow(v[0], 1, 1, 2)) < GRAD_TOL);
    assert!(grad_check(std::slice::from_ref(&a), |tp, v| tp.reshape(v[0], &[3, 2])) < GRAD_TOL);
    let c = random_tensor(&[2, 3, 4], &mut r);
    assert!(grad_check(std::slice::from_ref(&c), |tp, v| tp.permute(v[0], &[2, 0, 1])) < GRAD_TOL);
    let w = random_tensor(&[3], &mut r);
    assert!(grad_check(&[c.clone(), w.clone()], |tp, v| tp.channel_scale(v[0], v[1])) < GRAD_TOL);
    assert!(grad_check(&[c, w], |tp, v| tp.channel_shift(v[0], v[1])) < GRAD_TOL);
    let x = random_tensor(&[4, 3], &mut r);
    let wt = random_tensor(&[5, 3], &mut r);
    let bias = random_tensor(&[5], &mut r);
    assert!(grad_check(&[x, wt, bias], |tp, v| tp.linear(v[0], v[1], Some(v[2]))) < GRAD_TOL);
    // dropout with a fixed mask is linear in its input
    let d = random_tensor(&[20], &mut r);
    assert!(
        grad_check(&[d], |tp, v| {
            let mut mask_rng = rng(99);
            tp.dropout(v[0], 0.3, true, &mut mask_rng)
        }) < GRAD_TOL
    );
}

#[test]
fn permute_moves_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let y = tape.permute(x, &[1, 0]).unwrap();
    assert_eq!(tape.shape(y), &[3, 2]);
    assert_eq!(tape.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
}

fn lstm_store(d_in: usize, hidden: usize) -> (ParamStore, [dcacrn::tensor::ParamId; 3]) {
    let mut store = ParamStore::new();
    let a = store.add("w_ih", Tensor::zeros(&[4 * hidden, d_in]));
    let b = store.add("w_hh", Tensor::zeros(&[4 * hidden, hidden]));
    let c = store.add("bias", Tensor::zeros(&[4 * hidden]));
    (store, [a, b, c])
}

#[test]
fn lstm_zero_weights_keep_zero_state() {
    let (store, ids) = lstm_store(3, 4);
    let mut tape = Tape::new();
    let w = LstmVars {
        w_ih: tape.param(&store, ids[0]),
        w_hh: tape.param(&store, ids[1]),
        bias: tape.param(&store, ids[2]),
    };
    let x = tape.constant(random_tensor(&[2, 3], &mut rng(14)));
    let h = tape.constant(Tensor::zeros(&[2, 4]));
    let c = tape.constant(Tensor::zeros(&[2, 4]));
    let (h1, c1) = lstm_step(&mut tape, x, h, c, &w).unwrap();
    assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(c1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_saturated_forget_gate_preserves_cell() {
    let (mut store, ids) = lstm_store(3, 4);
    for v in &mut store.value_mut(ids[2]).data_mut()[4..8] {
        *v = 60.0;
    }
    let mut tape = Tape::new();
    let w = LstmVars {
        w_ih: tape.param(&store, ids[0]),
        w_hh: tape.param(&store, ids[1]),
        bias: tape.param(&store, ids[2]),
    };
    let x = tape.constant(random_tensor(&[1, 3], &mut rng(15)));
    let h = tape.constant(random_tensor(&[1, 4], &mut rng(16)));
    let c_prev = random_tensor(&[1, 4], &mut rng(17));
    let c = tape.constant(c_prev.clone());
    let (_, c1) = lstm_step(&mut tape, x, h, c, &w).unwrap();
    assert!(tape.value(c1).max_abs_diff(&c_prev) < 1e-12);
}

#[test]
fn lstm_gradient_matches_finite_differences() {
    let mut r = rng(18);
    let inputs = vec![
        random_tensor(&[2, 3], &mut r),
        random_tensor(&[2, 4], &mut r),
        random_tensor(&[2, 4], &mut r),
        random_tensor(&[16, 3], &mut r),
        random_tensor(&[16, 4], &mut r),
        random_tensor(&[16], &mut r),
    ];
    let err = grad_check(&inputs, |tp, v| {
        let w = LstmVars {
            w_ih: v[3],
            w_hh: v[4],
            bias: v[5],
        };
        let (h, c) = lstm_step(tp, v[0], v[1], v[2], &w)?;
        // weight both outputs
        let both = tp.add(h, c)?;
        tp.add(both, h)
    });
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 0.5, 0.0]));
    let uniform = tape.constant(Tensor::zeros(&[3, 4]));
    let l = cross_entropy_with_l2(&mut tape, uniform, &[0, 1, 3], 0.01, w).unwrap();
    assert!((tape.value(l).data()[0] - (4f64.ln() + 0.01 * 5.25)).abs() < 1e-12);

    let confident = tape.constant(t(&[1, 3], &[0.0, 800.0, 0.0]));
    let l = cross_entropy_with_l2(&mut tape, confident, &[1], 0.01, w).unwrap();
    assert!((tape.value(l).data()[0] - 0.0525).abs() < 1e-12);

    // B=2 direct log-softmax
    let logits = [[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
    let labels = [2usize, 0];
    let direct: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, y)| {
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            -(row[y].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    let lv = tape.constant(t(&[2, 3], &logits.concat()));
    let l = cross_entropy_with_l2(&mut tape, lv, &labels, 0.0, w).unwrap();
    assert!((tape.value(l).data()[0] - direct).abs() < 1e-12);

    let bad = tape.constant(Tensor::zeros(&[1, 2]));
    assert_eq!(tape.cross_entropy(bad, &[2]).unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(19);
    let logits = random_tensor(&[3, 4], &mut r);
    let w = random_tensor(&[4, 2], &mut r);
    let err = grad_check(&[logits, w], |tp, v| cross_entropy_with_l2(tp, v[0], &[1, 3, 0], 0.3, v[1]));
    assert!(err < GRAD_TOL);
}

#[test]
fn backward_basic_rules() {
    let x0 = t(&[3], &[1.0, -2.0, 0.5]);
    let mut tape = Tape::new();
    let x = tape.variable(x0.clone());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.variable(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.variable(x0);
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn param_gradients_accumulate_until_zeroed() {
    let mut store = ParamStore::new();
    let id = store.add("w", t(&[2], &[1.0, 3.0]));
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum_squares(w);
        tape.backward(s).unwrap().accumulate_into(&mut store);
    }
    assert_eq!(store.grad(id), &[4.0, 12.0]);
    store.zero_grad();
    assert_eq!(store.grad(id), &[0.0, 0.0]);
}

#[test]
fn adam_training_is_deterministic() {
    let run = || {
        let mut r = rng(20);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&[3, 2], &mut r));
        let target = random_tensor(&[4, 2], &mut r);
        let x = random_tensor(&[4, 3], &mut r);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut losses = Vec::new();
        for _ in 0..10 {
            store.zero_grad();
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let xv = tape.constant(x.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let neg = tape.constant(Tensor::new(vec![4, 2], target.data().iter().map(|v| -v).collect()).unwrap());
            let d = tape.add(y, neg).unwrap();
            let l = tape.sum_squares(d);
            losses.push(tape.value(l).data()[0]);
            tape.backward(l).unwrap().accumulate_into(&mut store);
            adam.step(&mut store);
        }
        (store.value(w).clone(), losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(la, lb);
    assert!(la[9] < la[0]);
}

#[test]
fn relu_propagates_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[f64::NAN, -1.0, 2.0]));
    let y = tape.relu(x);
    let v = tape.value(y).data();
    assert!(v[0].is_nan());
    assert_eq!(&v[1..], &[0.0, 2.0]);
}
