//! Forward semantics of each op against direct nested-loop oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vexkit_ndgrad::{BnMode, PoolGeom, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<usize>, Vec<f64>) {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride.0 + i) as isize - pad.0 as isize;
                                let ix = (xx * stride.1 + j) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((s * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 1, 4, 6], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let w = tape.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(xv, w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [
        ([1, 1, 5, 5], [1, 1, 3, 3], (1, 1), (0, 0)),
        ([2, 3, 7, 6], [4, 3, 3, 3], (2, 1), (1, 1)),
        ([1, 2, 9, 4], [3, 2, 5, 1], (1, 2), (2, 0)),
        ([2, 2, 6, 6], [2, 2, 1, 1], (1, 1), (0, 0)),
    ];
    for (xs, ws, stride, pad) in cases {
        let x = random(&xs, &mut rng);
        let w = random(&ws, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.input(x.clone()), tape.input(w.clone()));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let (shape, expect) = conv_oracle(&x, &w, stride, pad);
        assert_eq!(tape.value(y).shape(), shape.as_slice());
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1_geometry_on_full_spectrogram() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[1, 1, 512, 300]));
    let w = tape.input(Tensor::zeros(&[2, 1, 7, 7]));
    let y = tape.conv2d(x, w, None, (2, 2), (3, 3)).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 256, 150]);
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.input(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(tape.conv2d(x, w, None, (1, 1), (0, 0)).is_err());
    let w = tape.input(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(tape.conv2d(x, w, None, (1, 1), (0, 0)).is_err());
}

#[test]
fn batchnorm_moments_and_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[8, 3, 4, 5], |_| rng.gen_range(-3.0..5.0));
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let g = tape.input(Tensor::full(&[3], 1.0));
    let b = tape.input(Tensor::zeros(&[3]));
    let (y, stats) = tape.batchnorm(xv, g, b, BnMode::Train).unwrap();
    assert!(stats.is_some());
    let yv = tape.value(y).clone();
    let per = 8 * 4 * 5;
    for c in 0..3 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|s| (0..20).map(move |i| (s * 3 + c) * 20 + i))
            .map(|i| yv.data()[i])
            .collect();
        let m = vals.iter().sum::<f64>() / per as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / per as f64;
        assert!(m.abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-6);
    }

    // already-normalized input passes through; gamma=2, beta=3 is affine
    let xn = tape.input(yv.clone());
    let (y1, _) = tape.batchnorm(xn, g, b, BnMode::Train).unwrap();
    for (a, e) in tape.value(y1).data().iter().zip(yv.data()) {
        assert!((a - e).abs() < 1e-6);
    }
    let g2 = tape.input(Tensor::full(&[3], 2.0));
    let b3 = tape.input(Tensor::full(&[3], 3.0));
    let (y2, _) = tape.batchnorm(xn, g2, b3, BnMode::Train).unwrap();
    for (a, e) in tape.value(y2).data().iter().zip(yv.data()) {
        assert!((a - (2.0 * e + 3.0)).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, 10.0, 14.0]).unwrap());
    let g = tape.input(Tensor::full(&[2], 1.0));
    let b = tape.input(Tensor::zeros(&[2]));
    let mean = [1.0, 10.0];
    let var = [4.0, 16.0];
    let (y, stats) = tape
        .batchnorm(x, g, b, BnMode::Eval { mean: &mean, var: &var })
        .unwrap();
    assert!(stats.is_none());
    let expect = [0.0, 1.0, 0.0, 1.0];
    for (a, e) in tape.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-8);
    }
    let bad = tape.input(Tensor::full(&[3], 1.0));
    assert!(tape.batchnorm(x, bad, b, BnMode::Train).is_err());
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn maxpool_matches_nested_loops_on_ramp() {
    let (h, w) = (9, 11);
    let ramp = Tensor::from_fn(&[1, 2, h, w], |i| ((i * 7) % 23) as f64 - (i as f64) * 0.01);
    let mut tape = Tape::new();
    let x = tape.input(ramp.clone());
    let y = tape
        .maxpool2d(x, PoolGeom::new((3, 3), (2, 2), (1, 1)))
        .unwrap();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    assert_eq!(tape.value(y).shape(), &[1, 2, oh, ow]);
    for c in 0..2 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            best = best.max(ramp.data()[(c * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                assert_eq!(tape.value(y).data()[(c * oh + oy) * ow + ox], best);
            }
        }
    }
}

#[test]
fn avgpool_full_extent_is_mean() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(&[1, 3, 1, 37], 2.5));
    let y = tape.avgpool2d(x, (1, 37), (1, 1)).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5, 2.5, 2.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = random(&[1, 1, 8, 10], &mut rng);
    let mean = t.data().iter().sum::<f64>() / 80.0;
    let x = tape.input(t);
    let y = tape.avgpool2d(x, (8, 10), (1, 1)).unwrap();
    assert!((tape.value(y).data()[0] - mean).abs() < 1e-12);
}

#[test]
fn linear_matches_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d, k) = (3, 5, 4);
    let x = random(&[n, d], &mut rng);
    let w = random(&[k, d], &mut rng);
    let b = random(&[k], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for i in 0..n {
        for j in 0..k {
            let mut acc = b.data()[j];
            for t in 0..d {
                acc += x.data()[i * d + t] * w.data()[j * d + t];
            }
            assert!((tape.value(y).data()[i * k + j] - acc).abs() < 1e-12);
        }
    }

    // identity weight passes input through; zero weight gives the bias
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let ev = tape.input(eye);
    let y = tape.linear(xv, ev, None).unwrap();
    assert_eq!(tape.value(y), &x);
    let zv = tape.input(Tensor::zeros(&[k, d]));
    let y = tape.linear(xv, zv, Some(bv)).unwrap();
    for row in tape.value(y).data().chunks(k) {
        assert_eq!(row, b.data());
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.input(random(&[2, 2, 8, 8], &mut rng));
        let w = tape.input(random(&[3, 2, 3, 3], &mut rng));
        let y = tape.conv2d(x, w, None, (1, 1), (1, 1)).unwrap();
        let g = tape.input(Tensor::full(&[3], 1.0));
        let b = tape.input(Tensor::zeros(&[3]));
        let (y, _) = tape.batchnorm(y, g, b, BnMode::Train).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn constant_leaf_gives_the_same_parameter_gradients() {
    // one conv layer wide enough for the unfolded path and one narrow
    // enough for the direct kernels
    for (ci, co) in [(1, 2), (3, 8)] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut set = vexkit_ndgrad::ParamSet::new();
        set.insert("w", random(&[co, ci, 3, 3], &mut rng), true).unwrap();
        let x = random(&[2, ci, 9, 7], &mut rng);
        let grads = |as_constant: bool| {
            let mut tape = Tape::new();
            let xv = if as_constant { tape.constant(x.clone()) } else { tape.input(x.clone()) };
            let w = tape.param(&set, "w").unwrap();
            let y = tape.conv2d(xv, w, None, (1, 1), (1, 1)).unwrap();
            let n = tape.value(y).len();
            let flat = tape.reshape(y, &[1, n]).unwrap();
            let proj = tape.constant(Tensor::from_fn(&[1, n], |i| (i as f64 * 0.37).sin()));
            let l = tape.linear(flat, proj, None).unwrap();
            let g = tape.backward(l).unwrap();
            (g.param("w").unwrap().clone(), g.input(xv).cloned())
        };
        let (w_const, x_const) = grads(true);
        let (w_input, x_input) = grads(false);
        assert_eq!(w_const, w_input);
        assert!(x_const.is_none());
        assert_eq!(x_input.unwrap().shape(), x.shape());
    }
}
