mod common;

use common::{random_tensor, rel_err, rng, FD_STEP};
use dcacrn::model::{
    con1_forward, con2_forward, con3_forward, dca_forward, model_forward, model_loss, AttentionScores, DcaVars,
    ModelConfig, ModelParams, ParameterCounts,
};
use dcacrn::tensor::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        regions: 6,
        windows: 5,
        s1: 2,
        s2: 1,
        s3: 2,
        k1: 2,
        k2: 2,
        c1: 2,
        lstm_hidden: 4,
        ..ModelConfig::default()
    }
}

fn scalars(tape: &mut Tape, c: usize, w: [f64; 3]) -> DcaVars {
    DcaVars {
        wq: tape.constant(Tensor::full(&[c], w[0])),
        wk: tape.constant(Tensor::full(&[c], w[1])),
        wv: tape.constant(Tensor::full(&[c], w[2])),
        bias: None,
    }
}

/// Runs Con1 in eval mode and returns its pre-normalization map.
fn con1_pre(params: &ModelParams, input: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(input.clone());
    let out = con1_forward(&mut tape, &params.config, x, &bound.con1, &params.bn[0], false, &mut rng(0)).unwrap();
    tape.value(out.pre_norm).clone()
}

#[test]
fn con1_indicator_kernel_selects_a_column() {
    let config = ModelConfig { c1: 3, ..tiny() };
    let mut params = ModelParams::init(&config, 1).unwrap();
    let (n, t, s1, j0) = (config.regions, config.windows, config.s1, 4);
    let mut w = vec![0.0; 3 * n * s1];
    for k in 0..3 {
        w[(k * n + j0) * s1] = 1.0;
    }
    params.set("con1.weight", &w).unwrap();
    let f = random_tensor(&[2, t, n, n], &mut rng(2));
    let out = con1_pre(&params, &f);
    assert_eq!(out.shape(), &[2, 3, n, t - s1 + 1]);
    for b in 0..2 {
        for k in 0..3 {
            for i in 0..n {
                for u in 0..t - s1 + 1 {
                    assert_eq!(out.at(&[b, k, i, u]), f.at(&[b, u, i, j0]));
                }
            }
        }
    }
}

#[test]
fn con1_all_ones_kernel_on_three_regions() {
    let config = ModelConfig {
        regions: 3,
        windows: 3,
        s1: 2,
        s3: 1,
        c1: 2,
        ..tiny()
    };
    let mut params = ModelParams::init(&config, 3).unwrap();
    params.set("con1.weight", &[1.0; 2 * 3 * 2]).unwrap();
    params.set("con1.bias", &[0.0, 0.5]).unwrap();
    let f = random_tensor(&[1, 3, 3, 3], &mut rng(4));
    let out = con1_pre(&params, &f);
    assert_eq!(out.shape(), &[1, 2, 3, 2]);
    for k in 0..2 {
        for i in 0..3 {
            for t in 0..2 {
                let mut want = [0.0, 0.5][k];
                for j in 0..3 {
                    for s in 0..2 {
                        want += f.at(&[0, t + s, i, j]);
                    }
                }
                assert!((out.at(&[0, k, i, t]) - want).abs() < 1e-12);
            }
        }
    }
}

fn dca_run(input: &Tensor, w: [f64; 3], dk: usize) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let vars = scalars(&mut tape, input.shape()[1], w);
    let out = dca_forward(&mut tape, x, &vars, dk).unwrap();
    (
        tape.value(out.pre_norm).clone(),
        tape.value(out.output).clone(),
        tape.value(out.scores).clone(),
    )
}

#[test]
fn zero_weight_attention_is_uniform_and_pure_residual() {
    let input = random_tensor(&[2, 3, 5, 4], &mut rng(5));
    let (pre, _, scores) = dca_run(&input, [0.0, 0.0, 0.0], 4);
    assert!(scores.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    assert!(pre.data().iter().zip(input.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zero_value_weight_keeps_input_bitwise_for_any_scores() {
    let input = random_tensor(&[1, 4, 6, 3], &mut rng(6));
    let (pre, _, _) = dca_run(&input, [1.7, -0.4, 0.0], 3);
    assert!(pre.data().iter().zip(input.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn uniform_attention_adds_the_region_mean() {
    let (c, n, u) = (2, 5, 3);
    let input = random_tensor(&[1, c, n, u], &mut rng(7));
    let (pre, _, _) = dca_run(&input, [0.0, 0.0, 1.0], u);
    for l in 0..c {
        for t in 0..u {
            let mean = (0..n).map(|m| input.at(&[0, l, m, t])).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((pre.at(&[0, l, i, t]) - (mean + input.at(&[0, l, i, t]))).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn three_region_attention_matches_direct_evaluation() {
    let rows = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let input = Tensor::new(vec![1, 1, 3, 2], rows.iter().flatten().copied().collect()).unwrap();
    let (pre, out, scores) = dca_run(&input, [1.0, 1.0, 1.0], 2);

    let mut p = [[0.0; 3]; 3];
    for i in 0..3 {
        let logits: Vec<f64> = (0..3)
            .map(|j| (rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]) / 2f64.sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..3 {
            p[i][j] = logits[j].exp() / z;
        }
    }
    let mut o = [[0.0; 2]; 3];
    for i in 0..3 {
        for t in 0..2 {
            o[i][t] = (0..3).map(|j| p[i][j] * rows[j][t]).sum::<f64>() + rows[i][t];
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            assert!((scores.at(&[0, 0, i, j]) - p[i][j]).abs() < 1e-12);
        }
        for t in 0..2 {
            assert!((pre.at(&[0, 0, i, t]) - o[i][t]).abs() < 1e-12);
        }
    }

    let flat: Vec<f64> = o.iter().flatten().copied().collect();
    let mean = flat.iter().sum::<f64>() / 6.0;
    let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
    for (k, v) in flat.iter().enumerate() {
        let want = (v - mean) / (var + 1e-5).sqrt();
        assert!((out.data()[k] - want).abs() < 1e-12);
    }
}

#[test]
fn con2_full_depth_sum_and_toy() {
    let config = ModelConfig {
        regions: 2,
        windows: 3,
        c1: 2,
        k1: 3,
        s3: 1,
        ..tiny()
    };
    let mut params = ModelParams::init(&config, 8).unwrap();
    let x = random_tensor(&[1, 2, 2, 2], &mut rng(9));
    let run = |params: &ModelParams| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let v = tape.constant(x.clone());
        let out = con2_forward(&mut tape, &params.config, v, &bound.con2, &params.bn[1], false, &mut rng(0)).unwrap();
        tape.value(out.pre_norm).clone()
    };

    params.set("con2.weight", &[1.0; 3 * 2 * 2]).unwrap();
    let out = run(&params);
    assert_eq!(out.shape(), &[1, 3, 1, 2]);
    for t in 0..2 {
        let want: f64 = (0..2).flat_map(|c| (0..2).map(move |n| (c, n))).map(|(c, n)| x.at(&[0, c, n, t])).sum();
        for k in 0..3 {
            assert!((out.at(&[0, k, 0, t]) - want).abs() < 1e-12);
        }
    }

    let w = random_tensor(&[3, 2, 2, 1], &mut rng(10));
    params.set("con2.weight", w.data()).unwrap();
    params.set("con2.bias", &[0.1, 0.2, 0.3]).unwrap();
    let out = run(&params);
    for k in 0..3 {
        for t in 0..2 {
            let mut want = [0.1, 0.2, 0.3][k];
            for c in 0..2 {
                for n in 0..2 {
                    want += w.at(&[k, c, n, 0]) * x.at(&[0, c, n, t]);
                }
            }
            assert!((out.at(&[0, k, 0, t]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn con3_full_width_and_constant_sequence() {
    let config = ModelConfig { s3: 4, k1: 2, k2: 3, ..tiny() };
    assert_eq!((config.con2_len(), config.u2()), (4, 1));
    let mut params = ModelParams::init(&config, 11).unwrap();
    params.set("con3.weight", &[0.25; 3 * 2 * 4]).unwrap();
    let x = Tensor::full(&[1, 2, 1, 4], 0.7);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(x);
    let out = con3_forward(&mut tape, &config, v, &bound.con3, &params.bn[2], false, &mut rng(0)).unwrap();
    let pre = tape.value(out.pre_norm);
    assert_eq!(pre.shape(), &[1, 3, 1, 1]);
    assert!(pre.data().iter().all(|&v| (v - 1.4).abs() < 1e-12));

    let config = ModelConfig { windows: 9, s3: 3, k1: 2, ..tiny() };
    let mut params = ModelParams::init(&config, 12).unwrap();
    params.set("con3.weight", &[1.0 / 6.0; 2 * 2 * 3]).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(Tensor::full(&[1, 2, 1, config.con2_len()], -2.0));
    let out = con3_forward(&mut tape, &config, v, &bound.con3, &params.bn[2], false, &mut rng(0)).unwrap();
    let pre = tape.value(out.pre_norm);
    assert_eq!(pre.shape(), &[1, 2, 1, config.u2()]);
    assert!(pre.data().iter().all(|&v| (v + 2.0).abs() < 1e-12));
}

fn forward_eval(params: &ModelParams, input: &Tensor) -> (Tensor, Option<Tensor>, dcacrn::model::ShapeTrace) {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = model_forward(&mut tape, params, x, false, &mut rng(0)).unwrap();
    let scores = out.scores.map(|s| tape.value(s).clone());
    (tape.value(out.logits).clone(), scores, out.trace)
}

#[test]
fn default_shape_trace() {
    let start = std::time::Instant::now();
    let config = ModelConfig::default();
    let params = ModelParams::init(&config, 13).unwrap();
    let f = random_tensor(&[1, 34, 116, 116], &mut rng(14));
    let (logits, scores, trace) = forward_eval(&params, &f);
    assert_eq!(trace.input, vec![34, 116, 116]);
    assert_eq!(trace.con1, vec![32, 116, 33]);
    assert_eq!(trace.dca, Some(vec![32, 116, 33]));
    assert_eq!(trace.con2, vec![5, 1, 33]);
    assert_eq!(trace.con3, vec![16, 1, 13]);
    assert_eq!(trace.lstm_input, (13, 16));
    assert_eq!((trace.lstm_output, trace.fc1, trace.fc2, trace.logits), (48, 32, 16, 2));
    assert_eq!(logits.shape(), &[1, 2]);
    assert_eq!(scores.unwrap().shape(), &[1, 32, 116, 116]);
    assert!(start.elapsed().as_secs_f64() < 1.0, "took {:?}", start.elapsed());
}

#[test]
fn output_width_follows_class_count() {
    for classes in [2, 4] {
        let config = ModelConfig { num_classes: classes, ..tiny() };
        let params = ModelParams::init(&config, 15).unwrap();
        let (logits, _, trace) = forward_eval(&params, &random_tensor(&[3, 5, 6, 6], &mut rng(16)));
        assert_eq!(logits.shape(), &[3, classes]);
        assert_eq!(trace.logits, classes);
    }
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let config = ModelConfig { num_classes: 4, ..tiny() };
    let mut params = ModelParams::init(&config, 17).unwrap();
    params.set("fc_out.weight", &[0.0; 4 * 16]).unwrap();
    params.set("fc_out.bias", &[0.0; 4]).unwrap();
    let (logits, _, _) = forward_eval(&params, &random_tensor(&[2, 5, 6, 6], &mut rng(18)));
    for row in logits.data().chunks(4) {
        let z: f64 = row.iter().map(|l| l.exp()).sum();
        assert!(row.iter().all(|l| (l.exp() / z - 0.25).abs() < 1e-15));
    }
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let params = ModelParams::init(&tiny(), 19).unwrap();
    let f = random_tensor(&[2, 5, 6, 6], &mut rng(20));
    let (a, sa, _) = forward_eval(&params, &f);
    let (b, sb, _) = forward_eval(&params, &f);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(sa, sb);
}

#[test]
fn disabling_attention_removes_scores_and_three_scalars_per_channel() {
    for dca_bias in [false, true] {
        let on = ModelConfig { dca_bias, ..tiny() };
        let off = ModelConfig { dca_enabled: false, ..on.clone() };
        let with = ModelParams::init(&on, 21).unwrap();
        let without = ModelParams::init(&off, 21).unwrap();
        let per = if dca_bias { 6 } else { 3 };
        assert_eq!(with.count().total - without.count().total, per * on.c1);
        let mut rest = with.count().layers;
        assert_eq!(rest.remove("dca"), Some(per * on.c1));
        assert_eq!(rest, without.count().layers);

        let (_, scores, trace) = forward_eval(&without, &random_tensor(&[1, 5, 6, 6], &mut rng(22)));
        assert!(scores.is_none() && trace.dca.is_none());
    }
}

#[test]
fn parameter_count_table() {
    let counts = ModelParams::init(&ModelConfig::default(), 23).unwrap().count();
    assert_eq!(counts.layer("dca"), 96);
    assert_eq!(counts.layer("con1"), 7456);
    assert_eq!(counts.layer("con2"), 5 * 32 * 116 + 5);
    assert_eq!(counts.layer("con3"), 16 * 5 * 8 + 16);
    assert_eq!(counts.layer("lstm"), 4 * 48 * (16 + 48 + 1));
    assert_eq!(counts.layer("fc_out"), 16 * 2 + 2);
    assert_eq!(counts.total, counts.layers.values().sum::<usize>());
    assert_eq!(ParameterCounts::from_store(&ParamStore::new()).total, 0);
}

#[test]
fn shape_pipeline_matches_closed_forms() {
    for n in 4..=8 {
        for t in 5..=9 {
            for s1 in [1, 2] {
                for s3 in [2, 3] {
                    let config = ModelConfig {
                        regions: n,
                        windows: t,
                        s1,
                        s3,
                        c1: 3,
                        k1: 2,
                        k2: 3,
                        lstm_hidden: 5,
                        ..ModelConfig::default()
                    };
                    let params = ModelParams::init(&config, 24).unwrap();
                    let (_, scores, trace) = forward_eval(&params, &Tensor::full(&[1, t, n, n], 0.3));
                    let u1 = t - s1 + 1;
                    let u2 = (u1 - s3) / 2 + 1;
                    assert_eq!(trace.con1, vec![3, n, u1]);
                    assert_eq!(trace.dca, Some(vec![3, n, u1]));
                    assert_eq!(trace.con2, vec![2, 1, u1]);
                    assert_eq!(trace.con3, vec![3, 1, u2]);
                    assert_eq!(trace.lstm_input, (u2, 3));
                    assert_eq!(scores.unwrap().shape(), &[1, 3, n, n]);
                }
            }
        }
    }
}

#[test]
fn captured_scores_are_row_stochastic() {
    let params = ModelParams::init(&tiny(), 25).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[3, 5, 6, 6], &mut rng(26)));
    let out = model_forward(&mut tape, &params, x, true, &mut rng(27)).unwrap();
    for b in 0..3 {
        let s = AttentionScores::from_tape(&tape, out.scores.unwrap(), b).unwrap();
        assert_eq!(s.channels.len(), 2);
        assert!(s.max_row_sum_error() <= 1e-6);
        assert!(s.channels.iter().flatten().all(|&p| p >= 0.0));
    }
}

proptest! {
    #[test]
    fn scaled_inputs_keep_scores_row_stochastic(seed in 0u64..500, factor in 1e-3f64..1e3) {
        let input = random_tensor(&[1, 2, 5, 4], &mut rng(seed));
        let scaled = Tensor::new(input.shape().to_vec(), input.data().iter().map(|v| v * factor).collect()).unwrap();
        let (_, _, scores) = dca_run(&scaled, [1.0, 1.0, 1.0], 4);
        for row in scores.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn export_writes_one_matrix_pair_per_channel() {
    let scores = AttentionScores {
        regions: 2,
        channels: vec![vec![0.25, 0.75, 0.5, 0.5], vec![1.0, 0.0, 0.0, 1.0], vec![0.1, 0.9, 0.6, 0.4]],
    };
    let dir = tempfile::tempdir().unwrap();
    let files = scores.export(dir.path(), None).unwrap();
    assert_eq!(files.len(), 6);
    for ch in 0..3 {
        let m = dcacrn::model::read_matrix_csv(&dir.path().join(format!("attn_ch{ch}.csv"))).unwrap();
        let flat: Vec<f64> = m.into_iter().flatten().collect();
        assert_eq!(flat, scores.channels[ch]);
        let svg = std::fs::read_to_string(dir.path().join(format!("attn_ch{ch}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.matches("<rect").count() == 4);
    }
}

#[test]
fn checkpoint_roundtrip_and_attention_mismatch() {
    let mut params = ModelParams::init(&tiny(), 28).unwrap();
    params.bn[1].running_mean = vec![0.5, -0.25];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    params.save(&path).unwrap();
    let back = ModelParams::load(&path, &tiny()).unwrap();
    for (a, b) in params.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
        }
    }
    assert_eq!(back.bn[1].running_mean, vec![0.5, -0.25]);
    let off = ModelConfig { dca_enabled: false, ..tiny() };
    assert!(ModelParams::load(&path, &off).is_err());
}

/// Central differences on every trainable scalar of the tiny model, in
/// training mode (batch statistics, dropout) with a fixed dropout stream.
/// Parameters are jittered off their initial values: zero biases on a
/// sample whose Con3 output is fully rectified put ReLUs exactly on their kink.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let config = ModelConfig { dca_bias: true, ..tiny() };
    let mut params = ModelParams::init(&config, 29).unwrap();
    let mut jitter = rng(32);
    for p in params.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += jitter.random_range(-0.1..0.1);
        }
    }
    let input = random_tensor(&[3, 5, 6, 6], &mut rng(30));
    let labels = [0usize, 1, 1];

    let loss_at = |params: &ModelParams, grads: Option<&mut ParamStore>| -> f64 {
        let mut tape = Tape::new();
        let x: Var = tape.constant(input.clone());
        let out = model_forward(&mut tape, params, x, true, &mut rng(31)).unwrap();
        let loss = model_loss(&mut tape, params, &out, &labels).unwrap();
        let value = tape.value(loss).data()[0];
        if let Some(store) = grads {
            tape.backward(loss).unwrap().accumulate_into(store);
        }
        value
    };

    let mut store = params.store.clone();
    store.zero_grad();
    loss_at(&params, Some(&mut store));

    let mut worst: (f64, String) = (0.0, String::new());
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let name = params.store.get(id).name.clone();
        for i in 0..params.store.value(id).len() {
            let orig = params.store.value(id).data()[i];
            params.store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss_at(&params, None);
            params.store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss_at(&params, None);
            params.store.value_mut(id).data_mut()[i] = orig;
            let e = rel_err(store.grad(id)[i], (up - down) / (2.0 * FD_STEP));
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]"));
            }
        }
    }
    assert!(worst.0 < 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}
