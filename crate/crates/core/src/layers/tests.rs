use super::*;
use crate::tensor::{grad_check, grad_check_params, ParamSet, Tape, Tensor};
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn conv1d_identity_filter_copies_input() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 5], vec![1.0, -2.0, 3.0, 0.0, 0.5]).unwrap(), false);
    let w = tape.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap(), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let y = conv1d(&mut tape, x, w, b, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 5]);
    for f in 0..2 {
        assert_eq!(&tape.value(y).data()[f * 5..(f + 1) * 5], tape.value(x).data());
    }
}

#[test]
fn conv1d_output_length_for_25ms_branch_at_6s() {
    // 96000 samples, width 400, stride 160
    assert_eq!(conv_output_len(96000, 400, 160), 598);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 96000]), false);
    let w = tape.leaf(Tensor::zeros(&[1, 400]), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let y = conv1d(&mut tape, x, w, b, 160).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 598]);
}

#[test]
fn conv1d_matches_direct_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let batch = rng.random_range(1..3);
        let t = 20;
        let k = 5;
        let stride = 3;
        let n = rng.random_range(1..4);
        let x = rand_tensor(&mut rng, &[batch, t], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[n], -0.5, 0.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let y = conv1d(&mut tape, xv, wv, bv, stride).unwrap();
        let t_out = conv_output_len(t, k, stride);
        for bi in 0..batch {
            for i in 0..n {
                for tt in 0..t_out {
                    let mut acc = bias.data()[i];
                    for kk in 0..k {
                        acc += w.data()[i * k + kk] * x.data()[bi * t + tt * stride + kk];
                    }
                    let got = tape.value(y).data()[(bi * n + i) * t_out + tt];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv1d_rejects_input_shorter_than_filter() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3]), false);
    let w = tape.leaf(Tensor::zeros(&[1, 5]), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let err = conv1d(&mut tape, x, w, b, 1).unwrap_err();
    assert!(err.to_string().contains("shorter than filter width"));
}

#[test]
fn pooling_of_constant_input() {
    for (mode, expect) in [
        (PoolMode::Max, -0.5),
        (PoolMode::Average, -0.5),
        (PoolMode::L2, 0.5),
    ] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 6], -0.5), false);
        let y = pool1d(&mut tape, x, mode, 3, 3).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - expect).abs() < 1e-12, "{mode}: {v} != {expect}");
        }
    }
}

#[test]
fn max_pool_picks_maximum() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 1, 3], vec![1.0, 3.0, 2.0]).unwrap(), false);
    let y = pool1d(&mut tape, x, PoolMode::Max, 3, 3).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
}

#[test]
fn l2_pool_is_root_mean_square() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 1, 2], vec![3.0, 4.0]).unwrap(), false);
    let y = pool1d(&mut tape, x, PoolMode::L2, 2, 2).unwrap();
    let expect = (25.0f64 / 2.0).sqrt(); // 3.5355...
    assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn pool_window_larger_than_input_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 3]), false);
    assert!(pool1d(&mut tape, x, PoolMode::Max, 4, 1).is_err());
}

#[test]
fn adaptive_ranges_tile_the_input() {
    assert_eq!(adaptive_ranges(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
    for t in [591usize, 598, 599] {
        let ranges = adaptive_ranges(t, 64);
        assert_eq!(ranges.len(), 64);
        assert_eq!(ranges[0].0, 0);
        assert_eq!(ranges[63].1, t);
        for w in ranges.windows(2) {
            assert_eq!(w[0].1, w[1].0, "gap in ranges for T={t}");
        }
    }
}

#[test]
fn adaptive_pool_identity_when_sizes_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 7], -1.0, 1.0);
    for mode in [PoolMode::Max, PoolMode::Average] {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = adaptive_pool1d(&mut tape, xv, mode, 7).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }
}

#[test]
fn adaptive_pool_output_length_is_fixed() {
    for t in [591usize, 598, 599] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, t]), false);
        let y = adaptive_pool1d(&mut tape, x, PoolMode::Max, 64).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 64]);
    }
}

fn bn_fixture(channels: usize) -> (ParamSet, BatchNormLayer) {
    let mut params = ParamSet::new();
    let bn = BatchNormLayer::init(&mut params, "bn", channels);
    (params, bn)
}

#[test]
fn batchnorm_train_standardizes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (params, bn) = bn_fixture(3);
    let x = rand_tensor(&mut rng, &[8, 3, 10], -2.0, 5.0);
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let xv = tape.leaf(x, false);
    let (y, update) = bn.forward(&mut tape, &bind, xv, Mode::Train).unwrap();
    assert!(update.is_some());
    let yv = tape.value(y);
    for c in 0..3 {
        let mut vals = Vec::new();
        for b in 0..8 {
            for t in 0..10 {
                vals.push(yv.data()[(b * 3 + c) * 10 + t]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn batchnorm_affine_applies_gamma_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut params, bn) = bn_fixture(2);
    params.get_mut(bn.gamma).value = Tensor::filled(&[2], 2.0);
    params.get_mut(bn.beta).value = Tensor::filled(&[2], 3.0);
    let x = rand_tensor(&mut rng, &[16, 2, 5], -1.0, 1.0);
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let xv = tape.leaf(x, false);
    let (y, _) = bn.forward(&mut tape, &bind, xv, Mode::Train).unwrap();
    let yv = tape.value(y);
    for c in 0..2 {
        let mut vals = Vec::new();
        for b in 0..16 {
            for t in 0..5 {
                vals.push(yv.data()[(b * 2 + c) * 5 + t]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / vals.len() as f64)
            .sqrt();
        assert!((mean - 3.0).abs() < 1e-10);
        assert!((std - 2.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_identity_up_to_eps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (params, bn) = bn_fixture(2);
    let x = rand_tensor(&mut rng, &[4, 2, 6], -1.0, 1.0);
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let xv = tape.leaf(x.clone(), false);
    let (y, update) = bn.forward(&mut tape, &bind, xv, Mode::Eval).unwrap();
    assert!(update.is_none());
    for (a, b) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_rejects_train_batch_of_one() {
    let (params, bn) = bn_fixture(2);
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let xv = tape.leaf(Tensor::zeros(&[1, 2, 6]), false);
    let err = bn.forward(&mut tape, &bind, xv, Mode::Train).unwrap_err();
    assert!(err.to_string().contains("at least 2"));
    assert!(bn.forward(&mut tape, &bind, xv, Mode::Eval).is_ok());
}

#[test]
fn batchnorm_running_stats_update() {
    let (mut params, bn) = bn_fixture(1);
    let update = BnUpdate {
        layer_mean: bn.running_mean,
        layer_var: bn.running_var,
        batch_mean: Tensor::filled(&[1], 10.0),
        batch_var: Tensor::filled(&[1], 4.0),
        momentum: 0.9,
    };
    update.apply(&mut params);
    assert!((params.get(bn.running_mean).value.data()[0] - 1.0).abs() < 1e-12);
    assert!((params.get(bn.running_var).value.data()[0] - (0.9 + 0.4)).abs() < 1e-12);
}

#[test]
fn lstm_zero_weights_zero_forget_bias_gives_zero_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    let lstm = LstmLayer::init(&mut params, "lstm", 3, 2, &mut rng);
    for i in 0..params.len() {
        let p = params.get_index_mut(i);
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let x = tape.leaf(Tensor::filled(&[2, 4, 3], 0.7), false);
    let y = lstm.forward_sequence(&mut tape, &bind, x).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 2]);
    for &v in tape.value(y).data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn lstm_single_step_matches_hand_computation() {
    // 1 input, 2 hidden units, T=1, batch=1: y = o * tanh(i * g)
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParamSet::new();
    let lstm = LstmLayer::init(&mut params, "lstm", 1, 2, &mut rng);
    let wx = [0.5, -0.3, 0.2, 0.8, -0.6, 0.4, 0.1, -0.9]; // i, f, g, o x-weights
    for (g, chunk) in wx.chunks(2).enumerate() {
        params.get_mut(lstm.w_x[g]).value = Tensor::from_vec(&[1, 2], chunk.to_vec()).unwrap();
        params.get_mut(lstm.w_h[g]).value = Tensor::zeros(&[2, 2]);
    }
    params.get_mut(lstm.bias[0]).value = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
    params.get_mut(lstm.bias[1]).value = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
    params.get_mut(lstm.bias[2]).value = Tensor::from_vec(&[2], vec![-0.2, 0.3]).unwrap();
    params.get_mut(lstm.bias[3]).value = Tensor::from_vec(&[2], vec![0.4, -0.1]).unwrap();
    let xval = 0.6f64;
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let x = tape.leaf(Tensor::from_vec(&[1, 1, 1], vec![xval]).unwrap(), false);
    let y = lstm.forward_sequence(&mut tape, &bind, x).unwrap();
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    for u in 0..2 {
        let i = sigmoid(xval * wx[u] + [0.1, 0.2][u]);
        let g = (xval * wx[4 + u] + [-0.2, 0.3][u]).tanh();
        let o = sigmoid(xval * wx[6 + u] + [0.4, -0.1][u]);
        // c0 = 0 so the forget path contributes nothing on the first step
        let expect = o * (i * g).tanh();
        let got = tape.value(y).data()[u];
        assert!((got - expect).abs() < 1e-12, "unit {u}: {got} vs {expect}");
    }
}

#[test]
fn lstm_sequence_gradients_check_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = ParamSet::new();
    let lstm = LstmLayer::init(&mut params, "lstm", 2, 2, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let err = grad_check_params(&params, 1e-3, |tape, bind| {
        let xv = tape.leaf(x.clone(), false);
        let y = lstm.forward_sequence(tape, bind, xv)?;
        tape.sum_all(y)
    })
    .unwrap();
    assert!(err < 1e-4, "lstm grad error {err}");
    // and with respect to the input sequence
    let err = grad_check(
        |tape, xv| {
            let bind = tape.bind(&params);
            let y = lstm.forward_sequence(tape, &bind, xv)?;
            tape.sum_all(y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "lstm input grad error {err}");
}

#[test]
fn conv2d_one_by_one_filter_is_channel_mixing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let w = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w, false);
    let bv = tape.leaf(Tensor::zeros(&[1]), false);
    let y = conv2d(&mut tape, xv, wv, bv).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    for i in 0..9 {
        let expect = 2.0 * x.data()[i] - x.data()[9 + i];
        assert!((tape.value(y).data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn conv2d_then_pool_shape_example() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 64, 120]), false);
    let w = tape.leaf(Tensor::zeros(&[32, 1, 2, 2]), false);
    let b = tape.leaf(Tensor::zeros(&[32]), false);
    let y = conv2d(&mut tape, x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 32, 63, 119]);
    let p = pool2d_max(&mut tape, y, 2, 2).unwrap();
    assert_eq!(tape.shape(p), &[1, 32, 31, 59]);
}

#[test]
fn conv2d_matches_scalar_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (b, c, h, w, f) = (2, 2, 4, 5, 3);
        let x = rand_tensor(&mut rng, &[b, c, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[f, c, 2, 2], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[f], -0.5, 0.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(wt.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let y = conv2d(&mut tape, xv, wv, bv).unwrap();
        let (ho, wo) = (h - 1, w - 1);
        for bi in 0..b {
            for fi in 0..f {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias.data()[fi];
                        for ci in 0..c {
                            for ki in 0..2 {
                                for kj in 0..2 {
                                    acc += wt.data()[((fi * c + ci) * 2 + ki) * 2 + kj]
                                        * x.data()[((bi * c + ci) * h + oi + ki) * w + oj + kj];
                                }
                            }
                        }
                        let got = tape.value(y).data()[((bi * f + fi) * ho + oi) * wo + oj];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn dropout_zero_rate_and_eval_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::filled(&[4, 4], 1.0);
    for (rate, mode) in [(0.0, Mode::Train), (0.5, Mode::Eval)] {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = dropout(&mut tape, xv, rate, mode, &mut rng).unwrap();
        assert_eq!(y, xv, "identity should not even add a node");
    }
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::filled(&[1, 100], 1.0);
    let trials = 1000; // 100_000 samples total
    let mut sum = 0.0;
    for _ in 0..trials {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = dropout(&mut tape, xv, 0.3, Mode::Train, &mut rng).unwrap();
        sum += tape.value(y).data().iter().sum::<f64>();
    }
    let mean = sum / (trials as f64 * 100.0);
    assert!((mean - 1.0).abs() < 0.01, "dropout mean {mean}");
}

#[test]
fn dropout_rejects_bad_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), false);
    assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
    assert!(dropout(&mut tape, x, -0.1, Mode::Train, &mut rng).is_err());
}

#[test]
fn uniform_logits_lose_ln4() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[3, 4]), false);
    let loss = softmax_cross_entropy(&mut tape, logits, &[0, 1, 3]).unwrap();
    assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_gradient_is_probs_minus_onehot_over_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let logits = rand_tensor(&mut rng, &[2, 4], -2.0, 2.0);
    let labels = [2usize, 0];
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone(), true);
    let loss = softmax_cross_entropy(&mut tape, lv, &labels).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(lv).unwrap();
    let probs = softmax_rows(&logits);
    for b in 0..2 {
        for k in 0..4 {
            let onehot = if k == labels[b] { 1.0 } else { 0.0 };
            let expect = (probs.data()[b * 4 + k] - onehot) / 2.0;
            assert!((grad.data()[b * 4 + k] - expect).abs() < 1e-12);
        }
    }
    // agree with finite differences too
    let err = grad_check(
        |t, v| softmax_cross_entropy(t, v, &labels),
        &logits,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-6, "softmax grad error {err}");
}

#[test]
fn softmax_stays_finite_for_huge_logits() {
    let mut tape = Tape::new();
    let logits = tape.leaf(
        Tensor::from_vec(&[1, 4], vec![1000.0, -1000.0, 999.0, 0.0]).unwrap(),
        true,
    );
    let loss = softmax_cross_entropy(&mut tape, logits, &[1]).unwrap();
    assert!(tape.value(loss).item().is_finite());
    tape.backward(loss).unwrap();
    assert!(tape.grad(logits).unwrap().is_finite());
}

#[test]
fn softmax_rejects_label_out_of_range() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[1, 4]), false);
    let err = softmax_cross_entropy(&mut tape, logits, &[4]).unwrap_err();
    assert!(err.to_string().contains("out of range"));
}

#[test]
fn dense_computes_affine_map() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dense = DenseLayer::init(&mut params, "fc", 2, 3, &mut rng);
    params.get_mut(dense.w).value =
        Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    params.get_mut(dense.b).value = Tensor::from_vec(&[3], vec![0.5, -0.5, 0.0]).unwrap();
    let mut tape = Tape::new();
    let bind = tape.bind(&params);
    let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap(), false);
    let y = dense.forward(&mut tape, &bind, x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5, 5.0 - 6.0]);
}

#[test]
fn conv_bn_relu_pool_composition_grad_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut params = ParamSet::new();
    let conv = Conv1dLayer::init(&mut params, "conv", 2, 4, 2, &mut rng);
    let bn = BatchNormLayer::init(&mut params, "bn", 2);
    let x = rand_tensor(&mut rng, &[2, 12], -1.0, 1.0);
    let err = grad_check_params(&params, 1e-3, |tape, bind| {
        let xv = tape.leaf(x.clone(), false);
        let c = conv.forward(tape, bind, xv)?;
        let (n, _) = bn.forward(tape, bind, c, Mode::Train)?;
        let r = tape.relu(n)?;
        let p = adaptive_pool1d(tape, r, PoolMode::Max, 3)?;
        tape.sum_all(p)
    })
    .unwrap();
    assert!(err < 1e-4, "composition grad error {err}");
}

proptest! {
    #[test]
    fn conv1d_output_length_formula_holds(
        t in 1usize..200,
        k in 1usize..50,
        stride in 1usize..20,
    ) {
        prop_assume!(t >= k);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, t]), false);
        let w = tape.leaf(Tensor::zeros(&[1, k]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = conv1d(&mut tape, x, w, b, stride).unwrap();
        prop_assert_eq!(tape.shape(y)[2], (t - k) / stride + 1);
    }
}
