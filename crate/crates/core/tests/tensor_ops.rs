mod common;

use cirrus::tensor::{Tape, Tensor, Var};
use common::gradcheck::{away_from_zero, max_relative_error, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// out[o][i*s - p + ki][j*s - p + kj] += x[c][i][j] * k[c][o][ki][kj]
fn naive_deconv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, ci, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [_, co, kk, _] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h - 1) * stride + kk - 2 * pad;
    let ow = (w - 1) * stride + kk - 2 * pad;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for c in 0..ci {
            for i in 0..h {
                for j in 0..w {
                    let xv = x.data()[((n * ci + c) * h + i) * w + j];
                    for o in 0..co {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let z = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= oh as isize || z >= ow as isize {
                                    continue;
                                }
                                let kv = k.data()[((c * co + o) * kk + ki) * kk + kj];
                                out.data_mut()[((n * co + o) * oh + y as usize) * ow + z as usize] += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, ci, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [co, _, kk, _] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let i = (y * stride + ki) as isize - pad as isize;
                                let j = (z * stride + kj) as isize - pad as isize;
                                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((n * ci + c) * h + i as usize) * w + j as usize]
                                    * k.data()[((o * ci + c) * kk + ki) * kk + kj];
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * oh + y) * ow + z] = acc;
                }
            }
        }
    }
    out
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < tol)
}

#[test]
fn fully_connected_identity_and_zero_input() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero_b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.fully_connected(x, eye, zero_b).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = tape.fully_connected(z, eye, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    let bad = tape.constant(Tensor::zeros(&[4, 3]));
    assert!(tape.fully_connected(x, bad, b).is_err());
}

#[test]
fn deconv_size_and_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random_tensor(&[1, 4, 3, 3], &mut rng, -1.0, 1.0));
    let k = tape.constant(random_tensor(&[4, 2, 3, 3], &mut rng, -1.0, 1.0));
    let y = tape.deconv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 5, 5]);

    // One-hot kernel: each input value lands on exactly one strided output site.
    let xin = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let mut onehot = Tensor::zeros(&[1, 1, 3, 3]);
    onehot.data_mut()[4] = 1.0; // centre tap
    let mut tape = Tape::new();
    let xv = tape.constant(xin.clone());
    let kv = tape.constant(onehot.clone());
    let y = tape.deconv2d(xv, kv, 2, 1).unwrap();
    let expected = naive_deconv(&xin, &onehot, 2, 1);
    assert_eq!(tape.value(y), &expected);
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]);

    for _ in 0..10 {
        let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let xin = random_tensor(&[b, ci, h, w], &mut rng, -1.0, 1.0);
        let kin = random_tensor(&[ci, co, 3, 3], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(xin.clone()), tape.constant(kin.clone()));
        let y = tape.deconv2d(xv, kv, 2, 1).unwrap();
        assert!(close(tape.value(y), &naive_deconv(&xin, &kin, 2, 1), 1e-12));
    }
}

#[test]
fn conv_size_constant_and_oracle() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::filled(&[1, 1, 65, 65], 0.7));
    let avg = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = tape.conv2d(x, avg, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 33, 33]);
    let y1 = tape.conv2d(x, avg, 1, 0).unwrap();
    assert!(tape.value(y1).data().iter().all(|v| (v - 0.7).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let xin = random_tensor(&[b, ci, h, w], &mut rng, -1.0, 1.0);
        let kin = random_tensor(&[co, ci, 3, 3], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(xin.clone()), tape.constant(kin.clone()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        assert!(close(tape.value(y), &naive_conv(&xin, &kin, stride, pad), 1e-12));
    }
}

#[test]
fn activation_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
    let th = tape.tanh(x);
    let sg = tape.sigmoid(x);
    let lr = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(th).data()[0], 0.0);
    assert_eq!(tape.value(sg).data()[0], 0.5);
    assert_eq!(tape.value(lr).data(), &[0.0, -0.2, 2.0]);
}

#[test]
fn leaky_relu_subgradient_at_zero_is_slope() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1], &[0.0]));
    let y = tape.leaky_relu(x, 0.2);
    let y = tape.reshape(y, &[1]).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.2]);
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a_in = random_tensor::<f64>(&[2, 3, 4, 5], &mut rng, -1.0, 1.0);
    let b_in = random_tensor::<f64>(&[2, 2, 4, 5], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a_in.clone()), tape.constant(b_in.clone()));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 5, 4, 5]);
    let a2 = tape.slice_channels(c, 0, 3).unwrap();
    let b2 = tape.slice_channels(c, 3, 2).unwrap();
    assert_eq!(tape.value(a2), &a_in);
    assert_eq!(tape.value(b2), &b_in);
    let other = tape.constant(Tensor::zeros(&[2, 2, 4, 6]));
    assert!(tape.concat_channels(a, other).is_err());
}

#[test]
fn bce_values() {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[4, 1], &[1.0, 0.0, 1.0, 0.0]));
    let l = tape.bce_loss(p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(tape.value(l).data()[0] <= -(1.0f64 - 1e-7).ln() + 1e-15);
    let half = tape.constant(t(&[2, 1], &[0.5, 0.5]));
    let l = tape.bce_loss(half, &[1.0, 0.0]).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x_in = random_tensor::<f64>(&[2, 2, 5, 5], &mut rng, -1.0, 1.0);
    let k_in = random_tensor::<f64>(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.param(x_in.clone());
    let k = tape.param(k_in.clone());
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    let y = tape.tanh(y);
    let n = tape.value(y).numel();
    let y = tape.reshape(y, &[1, n]).unwrap();
    let w = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let l = tape.fully_connected(y, w, b).unwrap();
    let _ = tape.backward(l).unwrap();
    assert_eq!(tape.value(x), &x_in);
    assert_eq!(tape.value(k), &k_in);
}

#[test]
fn backward_is_linear_over_summed_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x_in = random_tensor::<f64>(&[3, 4], &mut rng, -1.0, 1.0);
        let w_in = random_tensor::<f64>(&[4, 2], &mut rng, -1.0, 1.0);
        let b_in = random_tensor::<f64>(&[2], &mut rng, -1.0, 1.0);
        let targets: Vec<f64> = (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let classes: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
        let build = |which: u8| {
            let mut tape = Tape::new();
            let w = tape.param(w_in.clone());
            let x = tape.constant(x_in.clone());
            let b = tape.param(b_in.clone());
            let h = tape.fully_connected(x, w, b).unwrap();
            let p = tape.sigmoid(h);
            let l1 = tape.bce_loss(p, &targets).unwrap();
            let l2 = tape.softmax_cross_entropy(h, &classes).unwrap();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let g = tape.backward(loss).unwrap();
            (g.get(w).unwrap().clone(), g.get(b).unwrap().clone())
        };
        let (w1, b1) = build(1);
        let (w2, b2) = build(2);
        let (ws, bs) = build(0);
        for (s, (a, b)) in ws.data().iter().zip(w1.data().iter().zip(w2.data())) {
            assert!((s - (a + b)).abs() < 1e-12);
        }
        for (s, (a, b)) in bs.data().iter().zip(b1.data().iter().zip(b2.data())) {
            assert!((s - (a + b)).abs() < 1e-12);
        }
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

fn check(label: &str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, rng: &mut ChaCha8Rng) {
    let err = max_relative_error(&inputs, build, rng, 1e-5, 1e-3, 40);
    assert!(err < 1e-6, "{label}: relative error {err}");
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..3 {
        let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
        let inputs = vec![
            random_tensor(&[b, i], &mut rng, -1.0, 1.0),
            random_tensor(&[i, o], &mut rng, -1.0, 1.0),
            random_tensor(&[o], &mut rng, -1.0, 1.0),
        ];
        check("fully_connected", inputs, &|t, v| t.fully_connected(v[0], v[1], v[2]).unwrap(), &mut rng);

        let inputs = vec![random_tensor(&[b, 2, 5, 4], &mut rng, -1.0, 1.0), random_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0)];
        check("conv2d", inputs, &|t, v| t.conv2d(v[0], v[1], 2, 1).unwrap(), &mut rng);

        let inputs = vec![random_tensor(&[b, 3, 3, 3], &mut rng, -1.0, 1.0), random_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0)];
        check("deconv2d", inputs, &|t, v| t.deconv2d(v[0], v[1], 2, 1).unwrap(), &mut rng);

        let inputs = vec![away_from_zero(&[b, 7], &mut rng)];
        check("leaky_relu", inputs.clone(), &|t, v| t.leaky_relu(v[0], 0.2), &mut rng);
        check("tanh", inputs.clone(), &|t, v| t.tanh(v[0]), &mut rng);
        check("sigmoid", inputs, &|t, v| t.sigmoid(v[0]), &mut rng);

        let inputs = vec![random_tensor(&[b, 2, 3, 3], &mut rng, -1.0, 1.0), random_tensor(&[b, 1, 3, 3], &mut rng, -1.0, 1.0)];
        check("concat_channels", inputs, &|t, v| t.concat_channels(v[0], v[1]).unwrap(), &mut rng);

        let targets: Vec<f64> = (0..b * 2).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let inputs = vec![random_tensor(&[b, 2], &mut rng, 0.05, 0.95)];
        check("bce_loss", inputs, &|t, v| t.bce_loss(v[0], &targets).unwrap(), &mut rng);
    }
}

#[test]
fn f32_gradients_are_within_loose_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Tensor<f32>> = vec![random_tensor(&[2, 3, 3, 3], &mut rng, -1.0, 1.0), random_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0)];
    let err = max_relative_error(&inputs, &|t, v| {
        let y = t.deconv2d(v[0], v[1], 2, 1).unwrap();
        t.tanh(y)
    }, &mut rng, 1e-2, 1e-2, 40);
    assert!(err < 1e-2, "f32 relative error {err}");
}

#[test]
fn loss_and_projection_gradients_over_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (b, f) = (rng.gen_range(1..5), rng.gen_range(1..7));

        let targets: Vec<f64> = (0..b * f).map(|_| rng.gen_range(0.0..1.0)).collect();
        let inputs = vec![random_tensor(&[b, f], &mut rng, -3.0, 3.0)];
        check("bce_with_logits", inputs, &|t, v| t.bce_with_logits(v[0], &targets).unwrap(), &mut rng);

        let classes: Vec<usize> = (0..b).map(|_| rng.gen_range(0..f)).collect();
        let inputs = vec![random_tensor(&[b, f], &mut rng, -3.0, 3.0)];
        check("softmax_cross_entropy", inputs, &|t, v| t.softmax_cross_entropy(v[0], &classes).unwrap(), &mut rng);

        let target: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inputs = vec![random_tensor(&[b, f], &mut rng, -1.0, 1.0)];
        check("mean_feature_distance", inputs, &|t, v| t.mean_feature_distance(v[0], &target).unwrap(), &mut rng);

        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let inputs = vec![away_from_zero(&[b, 2, h, w], &mut rng)];
        check("unit_pairs", inputs, &|t, v| t.unit_pairs(v[0], 1e-6).unwrap(), &mut rng);

        let pairs = rng.gen_range(2..6);
        let base: Tensor<f64> = random_tensor(&[pairs, 2, h, w], &mut rng, -1.0, 1.0);
        let gap: Tensor<f64> = away_from_zero(&[pairs, 2, h, w], &mut rng);
        let n = h * w * 2;
        let mut data = base.data().to_vec();
        for p in (1..pairs).step_by(2) {
            for j in 0..n {
                data[p * n + j] = data[(p - 1) * n + j] + gap.data()[p * n + j];
            }
        }
        let inputs = vec![t(&[pairs, 2, h, w], &data)];
        check("pair_l1", inputs, &|t, v| t.pair_l1(v[0]).unwrap(), &mut rng);
    }
}

#[test]
fn unit_pairs_have_unit_length_and_pair_l1_matches_oracle() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2, 2, 1, 2], &[3.0, 0.5, 4.0, -1.2, 0.0, 1.0, -2.0, 0.0]));
    let y = tape.unit_pairs(x, 0.0).unwrap();
    let v = tape.value(y).data().to_vec();
    let expected = [0.6, 0.5 / 1.3, 0.8, -1.2 / 1.3, 0.0, 1.0, -1.0, 0.0];
    for (a, e) in v.iter().zip(expected) {
        assert!((a - e).abs() < 1e-12, "{v:?}");
    }

    let mut tape = Tape::new();
    let x = tape.param(t(&[3, 2], &[1.0, 2.0, 0.0, 4.0, 9.0, 9.0]));
    let d = tape.pair_l1(x).unwrap();
    assert!((tape.value(d).data()[0] - 1.5).abs() < 1e-12);
    let single = tape.param(t(&[1, 2], &[1.0, 2.0]));
    assert!(tape.pair_l1(single).is_err());
}
