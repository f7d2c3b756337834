use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaksup_autograd::*;

const SEEDS: u64 = 50;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_primitive_passes_gradcheck() {
    let checks = primitive_suite(SEEDS).unwrap();
    assert!(checks.len() >= 20);
    for c in &checks {
        assert!(c.max_rel_error < TOL, "{}: {}", c.name, c.max_rel_error);
    }
}

#[test]
fn conv2d_hand_convolution() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let b = store.insert("b", Tensor::zeros(&[1])).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::ones(&[1, 5, 5])).unwrap();
    let (wv, bv) = (g.param(w), g.param(b));
    let y = g.conv2d(x, wv, bv).unwrap();
    let out = g.value(y);
    assert_eq!(out.data()[0], 4.0);
    assert_eq!(out.data()[2], 6.0);
    assert_eq!(out.data()[2 * 5 + 2], 9.0);
    assert_eq!(out.data()[5 + 1], 9.0);
}

#[test]
fn conv2d_delta_and_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, &[1, 4, 6]);
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let mut store = ParamStore::<f64>::new();
    let wd = store.insert("delta", delta).unwrap();
    let wz = store.insert("zero", Tensor::zeros(&[1, 1, 3, 3])).unwrap();
    let b = store.insert("b", Tensor::zeros(&[1])).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(input.clone()).unwrap();
    let (wdv, wzv, bv) = (g.param(wd), g.param(wz), g.param(b));
    let y = g.conv2d(x, wdv, bv).unwrap();
    assert_eq!(g.value(y), &input);
    let z = g.conv2d(x, wzv, bv).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

/// Direct zero-padded cross-correlation.
fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as i64;
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for y in 0..h {
            for xo in 0..wd {
                let mut s = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as i64 + ky as i64 - pad;
                            let ix = xo as i64 + kx as i64 - pad;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            s += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(co * h + y) * wd + xo] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (cin, cout, h, wd, k) in [(1, 1, 5, 5, 3), (2, 3, 7, 4, 5), (3, 2, 1, 2, 5), (2, 2, 6, 1, 3)] {
        let input = rand_tensor(&mut rng, &[cin, h, wd]);
        let mut store = ParamStore::<f64>::new();
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let bt = rand_tensor(&mut rng, &[cout]);
        let expect = naive_conv2d(&input, &wt, &bt);
        let w = store.insert("w", wt).unwrap();
        let b = store.insert("b", bt).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(input).unwrap();
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv2d(x, wv, bv).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn maxpool_ceil_shapes() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g
        .constant(Tensor::from_fn(&[2, 7, 5], |i| i as f64))
        .unwrap();
    let y = g.maxpool2d(x).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 3]);
    let z = g.maxpool2d(y).unwrap();
    assert_eq!(g.value(z).shape(), &[2, 2, 2]);
}

#[test]
fn softmax_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g
        .constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap())
        .unwrap();
    let y = g.softmax_rows(x, None).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = g
        .constant(Tensor::from_rows(&[vec![0.0, 2f64.ln()]]).unwrap())
        .unwrap();
    let y = g.softmax_rows(x, None).unwrap();
    assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    let x = g
        .constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap())
        .unwrap();
    let y = g.softmax_rows(x, None).unwrap();
    assert_eq!(g.value(y).data()[0], 1.0);
    assert!(g.value(y).data()[1] < 1e-300);
}

#[test]
fn fully_masked_row_is_an_error() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let err = g
        .softmax_rows(x, Some(&[true, false, false, false]))
        .unwrap_err();
    assert_eq!(err, AutogradError::FullyMaskedRow { row: 1 });
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::<f64>::new();
    let one = store.insert("g1", Tensor::ones(&[2])).unwrap();
    let zero = store.insert("b0", Tensor::zeros(&[2])).unwrap();
    let gz = store.insert("g0", Tensor::zeros(&[2])).unwrap();
    let bc = store.insert("bc", Tensor::full(&[2], 1.5)).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let (one, zero, gz, bc) = (g.param(one), g.param(zero), g.param(gz), g.param(bc));

    let c = g
        .constant(Tensor::from_rows(&[vec![4.0, 4.0]]).unwrap())
        .unwrap();
    let y = g.layer_norm(c, one, zero).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let r = g
        .constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap())
        .unwrap();
    let y = g.layer_norm(r, one, zero).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y).data()[0] + expect).abs() < 1e-12);
    assert!((g.value(y).data()[1] - expect).abs() < 1e-12);

    let y = g.layer_norm(r, gz, bc).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 1.5]);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::<f64>::new();
    let w = store
        .insert(
            "w",
            Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
        )
        .unwrap();
    let unused = store.insert("unused", Tensor::ones(&[3])).unwrap();

    let mut g = Graph::new(&store, Mode::Eval);
    let wv = g.param(w);
    let s = g.sum(wv).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).data(), &[1.0; 4]);
    assert_eq!(grads.get(unused).data(), &[0.0; 3]);

    // loss = sum(W·x) with x = [2, 5]ᵀ gives dL/dW[i][j] = x[j].
    let mut g = Graph::new(&store, Mode::Eval);
    let wv = g.param(w);
    let x = g
        .constant(Tensor::new(vec![2, 1], vec![2.0, 5.0]).unwrap())
        .unwrap();
    let y = g.matmul(wv, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).data(), &[2.0, 5.0, 2.0, 5.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::ones(&[2, 2])).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let wv = g.param(w);
    assert!(matches!(
        g.backward(wv),
        Err(AutogradError::NonScalarLoss(_))
    ));
}

#[test]
fn nan_forward_names_op() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::full(&[1, 2], 1e308)).unwrap();
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(matches!(
        err,
        AutogradError::NonFiniteForward { op: "scale", .. }
    ));
}

#[test]
fn nan_gradient_names_op() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::ones(&[1, 1])).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let wv = g.param(w);
    let custom = g
        .custom_scalar(wv, 0.0, Tensor::full(&[1, 1], f64::INFINITY))
        .unwrap();
    let err = g.backward(custom).unwrap_err();
    assert!(matches!(
        err,
        AutogradError::NonFiniteGradient { op: "custom", .. }
    ));
}

#[test]
fn dropout_reproducible_and_inert_in_eval() {
    let mut store = ParamStore::<f32>::new();
    let w = store.insert("w", Tensor::ones(&[8, 8])).unwrap();
    let run = |mode| {
        let mut g = Graph::new(&store, mode);
        let wv = g.param(w);
        let d = g.dropout(wv, 0.5).unwrap();
        g.value(d).clone()
    };
    assert_eq!(run(Mode::Train { seed: 3 }), run(Mode::Train { seed: 3 }));
    assert_ne!(run(Mode::Train { seed: 3 }), run(Mode::Train { seed: 4 }));
    assert_eq!(&run(Mode::Eval), store.get(w));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0))).unwrap();
        let y = g.softmax_rows(x, None).unwrap();
        let out = g.value(y);
        for r in 0..rows {
            let s: f64 = out.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(out.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let gain = store.insert("g", Tensor::ones(&[cols])).unwrap();
        let bias = store.insert("b", Tensor::zeros(&[cols])).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::from_fn(&[rows, cols], |_| rng.random_range(-5.0..5.0))).unwrap();
        let (gv, bv) = (g.param(gain), g.param(bias));
        let y = g.layer_norm(x, gv, bv).unwrap();
        let out = g.value(y);
        for r in 0..rows {
            let row = g.value(x).row(r);
            let m_in: f64 = row.iter().sum::<f64>() / cols as f64;
            let v_in: f64 = row.iter().map(|v| (v - m_in).powi(2)).sum::<f64>() / cols as f64;
            prop_assume!(v_in > 0.1);
            let m: f64 = out.row(r).iter().sum::<f64>() / cols as f64;
            let v: f64 = out.row(r).iter().map(|x| (x - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn unused_parameter_gets_exact_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", rand_tensor(&mut rng, &[3, 3])).unwrap();
        let b = store.insert("b", rand_tensor(&mut rng, &[3, 3])).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let av = g.param(a);
        let _bv = g.param(b);
        let sq = g.matmul(av, av).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adadelta_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0))).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        for v in grads.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let step = || {
            let mut p = store.clone();
            let mut st = AdaDeltaState::new(&p, 0.95, 1e-6);
            adadelta_step(&mut p, &grads, &mut st, 1.0).unwrap();
            adadelta_step(&mut p, &grads, &mut st, 1.0).unwrap();
            (p, st)
        };
        let (p1, s1) = step();
        let (p2, s2) = step();
        prop_assert!(s1.accum_grad_sq.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)));
        prop_assert_eq!(p1, p2);
        prop_assert_eq!(s1, s2);
    }
}
