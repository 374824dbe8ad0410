use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn node(kind: LayerKind, params: Vec<Tensor>) -> LayerNode {
    LayerNode::with_params(kind, params).unwrap()
}

fn run(n: &mut LayerNode, x: &Tensor) -> Tensor {
    n.forward(x, Mode::Eval).unwrap().0
}

/// Nested-loop grouped 3-D cross-correlation on one sample.
fn conv3d_oracle(
    x: &Tensor,
    w: &Tensor,
    b: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor {
    let (cin, d, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, cin_g, kd, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3), w.dim(4));
    assert_eq!(cin_g * groups, cin);
    let cout_g = cout / groups;
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = Tensor::zeros(&[cout, od, oh, ow]);
    for co in 0..cout {
        let g = co / cout_g;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[co];
                    for cl in 0..cin_g {
                        for a in 0..kd {
                            for bb in 0..kh {
                                for c in 0..kw {
                                    let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                    let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                    let ix = (xx * stride[2] + c) as isize - pad[2] as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    s += w.get(&[co, cl, a, bb, c])
                                        * x.get(&[g * cin_g + cl, iz as usize, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, z, y, xx], s);
                }
            }
        }
    }
    out
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

#[test]
fn conv2d_all_ones() {
    let k = LayerKind::conv2d(1, 1, 3, 1, 0, 1, true);
    let mut n = node(k, vec![Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1])]);
    let y = run(&mut n, &Tensor::full(&[1, 1, 3, 3], 1.0));
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.set(&[0, 0, 1, 1], 1.0);
    let mut n = node(LayerKind::conv2d(1, 1, 3, 1, 1, 1, false), vec![w]);
    let x = rand_tensor(&[1, 1, 6, 5], &mut rng);
    assert_eq!(run(&mut n, &x), x);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let mut n = node(LayerKind::conv2d(2, 3, 3, stride, pad, 1, true), vec![w.clone(), b.clone()]);
        let y = run(&mut n, &x);
        let want = conv3d_oracle(
            &x.reshape(&[2, 1, 5, 5]).unwrap(),
            &w.reshape(&[3, 2, 1, 3, 3]).unwrap(),
            b.data(),
            [1, stride, stride],
            [0, pad, pad],
            1,
        );
        let ws = want.shape().to_vec();
        assert_close(&y, &want.reshape(&[1, 3, ws[2], ws[3]]).unwrap(), 1e-12);
    }
}

#[test]
fn conv2d_kernel_larger_than_input_errors() {
    let mut n = LayerNode::new(LayerKind::conv2d(1, 1, 5, 1, 0, 1, false), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(
        n.forward(&Tensor::zeros(&[1, 1, 3, 3]), Mode::Eval),
        Err(Error::Shape(_))
    ));
}

#[test]
fn conv3d_examples() {
    let k = LayerKind::conv3d(1, 1, [3, 3, 3], [1, 1, 1], [0, 0, 0], 1, false);
    let mut n = node(k, vec![Tensor::full(&[1, 1, 3, 3, 3], 1.0)]);
    assert_eq!(run(&mut n, &Tensor::full(&[1, 1, 3, 3, 3], 1.0)).data(), &[27.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = LayerKind::conv3d(1, 1, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1, false);
    let mut n = node(k, vec![Tensor::full(&[1, 1, 1, 1, 1], 1.0)]);
    let x = rand_tensor(&[2, 1, 3, 4, 5], &mut rng);
    assert_eq!(run(&mut n, &x), x);

    let x = rand_tensor(&[1, 2, 4, 5, 6], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 2, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let k = LayerKind::conv3d(2, 3, [3, 2, 3], [2, 1, 2], [1, 0, 1], 1, true);
    let mut n = node(k, vec![w.clone(), b.clone()]);
    let y = run(&mut n, &x);
    let want = conv3d_oracle(&x.item(0), &w, b.data(), [2, 1, 2], [1, 0, 1], 1);
    assert_close(&y.item(0), &want, 1e-12);
}

#[test]
fn grouped_conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[1, 4, 5, 5], &mut rng);
    let w = rand_tensor(&[6, 4, 3, 3], &mut rng);
    let b = rand_tensor(&[6], &mut rng);
    // groups=1 is the plain convolution; compare bit-exactly against the 3-D form
    let mut n2 = node(LayerKind::conv2d(4, 6, 3, 1, 1, 1, true), vec![w.clone(), b.clone()]);
    let k3 = LayerKind::conv3d(4, 6, [1, 3, 3], [1, 1, 1], [0, 1, 1], 1, true);
    let mut n3 = node(k3, vec![w.reshape(&[6, 4, 1, 3, 3]).unwrap(), b.clone()]);
    let y2 = run(&mut n2, &x);
    let y3 = run(&mut n3, &x.reshape(&[1, 4, 1, 5, 5]).unwrap());
    assert_eq!(y2.data(), y3.data());

    // depthwise 1x1 with unit weights is the identity
    let mut n = node(LayerKind::conv2d(4, 4, 1, 1, 0, 4, false), vec![Tensor::full(&[4, 1, 1, 1], 1.0)]);
    assert_eq!(run(&mut n, &x), x);

    // groups=2 equals two independent convolutions on channel halves
    let wg = rand_tensor(&[6, 2, 3, 3], &mut rng);
    let mut ng = node(LayerKind::conv2d(4, 6, 3, 1, 1, 2, true), vec![wg.clone(), b.clone()]);
    let y = run(&mut ng, &x);
    let mut halves = Vec::new();
    for g in 0..2 {
        let xs = x.slice_axis(1, 2 * g..2 * g + 2).unwrap();
        let ws = wg.slice_axis(0, 3 * g..3 * g + 3).unwrap();
        let bs = b.slice_axis(0, 3 * g..3 * g + 3).unwrap();
        let mut n = node(LayerKind::conv2d(2, 3, 3, 1, 1, 1, true), vec![ws, bs]);
        halves.push(run(&mut n, &xs));
    }
    let want = Tensor::concat(&[&halves[0], &halves[1]], 1).unwrap();
    assert_close(&y, &want, 1e-12);

    let bad = LayerKind::conv2d(3, 6, 3, 1, 1, 2, true);
    assert!(bad.output_shape(&[1, 3, 5, 5]).is_err());
}

#[test]
fn batchnorm_examples() {
    let cfg = BatchNormConfig::default();
    let k = LayerKind::BatchNorm {
        channels: 1,
        config: cfg,
    };
    let mut n = node(k, vec![Tensor::full(&[1], 1.0), Tensor::zeros(&[1])]);
    n.buffers[1] = Tensor::full(&[1], 1.0 - cfg.eps);
    let x = Tensor::new(vec![1, 1, 1, 3], vec![-2.0, 0.5, 7.0]).unwrap();
    assert_close(&run(&mut n, &x), &x, 1e-5);
    n.buffers[1] = Tensor::full(&[1], 1.0);

    let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
    let (y, _) = n.forward(&x, Mode::Train).unwrap();
    let s = 1.0 / (1.0 + 1e-5f64).sqrt();
    assert_close(&y, &Tensor::new(vec![2, 1, 1, 1], vec![-s, s]).unwrap(), 1e-15);
    // running stats: mean 0.1*2, var 0.9 + 0.1*2 (unbiased 2 of {1,3})
    assert!((n.buffers[0].data()[0] - 0.2).abs() < 1e-15);
    assert!((n.buffers[1].data()[0] - 1.1).abs() < 1e-14);

    let mut n = node(k, vec![Tensor::full(&[1], 2.0), Tensor::full(&[1], 1.0)]);
    let (y, _) = n.forward(&x, Mode::Train).unwrap();
    assert_close(&y, &Tensor::new(vec![2, 1, 1, 1], vec![1.0 - 2.0 * s, 1.0 + 2.0 * s]).unwrap(), 1e-15);
    assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 3.0).abs() < 1e-4);
}

#[test]
fn activation_examples() {
    let x = Tensor::new(vec![1, 2], vec![-5.0, 5.0]).unwrap();
    let mut relu = node(LayerKind::Relu, vec![]);
    assert_eq!(run(&mut relu, &x).data(), &[0.0, 5.0]);
    let mut leaky = node(LayerKind::LeakyRelu { slope: 0.1 }, vec![]);
    assert_eq!(run(&mut leaky, &x).data(), &[-0.5, 5.0]);

    let x = Tensor::new(vec![1, 2], vec![2.0, -2.0]).unwrap();
    let g = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let (_, c) = leaky.forward(&x, Mode::Eval).unwrap();
    let b = leaky.backward(&c, &g, &mut Backprop::plain()).unwrap();
    assert_eq!(b.input.data(), &[1.0, 0.1]);

    let x = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
    let (_, c) = relu.forward(&x, Mode::Eval).unwrap();
    let b = relu
        .backward(&c, &Tensor::new(vec![1, 1], vec![123.0]).unwrap(), &mut Backprop::plain())
        .unwrap();
    assert_eq!(b.input.data(), &[0.0]);
}

#[test]
fn guided_rectifier_rule() {
    let cases = [(-1.0, 5.0, 0.0), (2.0, -5.0, 0.0), (2.0, 5.0, 5.0)];
    for (x, g, want) in cases {
        let xt = Tensor::new(vec![1], vec![x]).unwrap();
        let gt = Tensor::new(vec![1], vec![g]).unwrap();
        for slope in [0.0, 0.1] {
            assert_eq!(rectifier_backward(&xt, &gt, slope, true).unwrap().data(), &[want]);
        }
    }
}

#[test]
fn maxpool_examples() {
    let k = LayerKind::MaxPool2d {
        window: [2, 2],
        stride: [2, 2],
    };
    let mut n = node(k, vec![]);
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(run(&mut n, &x).data(), &[4.0]);
    assert!(run(&mut n, &Tensor::full(&[1, 2, 4, 4], 7.0))
        .data()
        .iter()
        .all(|&v| v == 7.0));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[1, 1, 6, 6], &mut rng);
    let y = run(&mut n, &x);
    for i in 0..3 {
        for j in 0..3 {
            let mut m = f64::NEG_INFINITY;
            for a in 0..2 {
                for b in 0..2 {
                    m = m.max(x.get(&[0, 0, 2 * i + a, 2 * j + b]));
                }
            }
            assert_eq!(y.get(&[0, 0, i, j]), m);
        }
    }

    // unique maxima: backward conserves gradient mass
    let (_, c) = n.forward(&x, Mode::Eval).unwrap();
    let g = rand_tensor(&[1, 1, 3, 3], &mut rng);
    let b = n.backward(&c, &g, &mut Backprop::plain()).unwrap();
    assert!((b.input.sum() - g.sum()).abs() < 1e-12);

    // ties route to the first position in scan order
    let (_, c) = n.forward(&Tensor::full(&[1, 1, 2, 2], 1.0), Mode::Eval).unwrap();
    let b = n
        .backward(&c, &Tensor::full(&[1, 1, 1, 1], 1.0), &mut Backprop::plain())
        .unwrap();
    assert_eq!(b.input.data(), &[1.0, 0.0, 0.0, 0.0]);

    assert!(n.forward(&Tensor::zeros(&[1, 1, 1, 3]), Mode::Eval).is_err());
}

#[test]
fn temporal_pool_examples() {
    let mut n = node(LayerKind::TemporalAvgPool, vec![]);
    let x = Tensor::new(vec![1, 1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
    assert_eq!(run(&mut n, &x).data(), &[3.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 3, 1, 2, 2], &mut rng);
    assert_eq!(run(&mut n, &x), x);
    let x = rand_tensor(&[1, 2, 5, 2, 3], &mut rng);
    let y = run(&mut n, &x);
    for c in 0..2 {
        for i in 0..2 {
            for j in 0..3 {
                let m: f64 = (0..5).map(|z| x.get(&[0, c, z, i, j])).sum::<f64>() / 5.0;
                assert!((y.get(&[0, c, 0, i, j]) - m).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn linear_input_gradient_is_transpose_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = rand_tensor(&[3, 4], &mut rng);
    let k = LayerKind::Linear {
        in_features: 4,
        out_features: 3,
    };
    let mut n = node(k, vec![w.clone(), Tensor::zeros(&[3])]);
    let x = rand_tensor(&[1, 4], &mut rng);
    let (y, c) = n.forward(&x, Mode::Eval).unwrap();
    let want = w.matmul(&x.transpose().unwrap()).unwrap();
    assert_close(&y, &want.transpose().unwrap(), 1e-15);
    let g = rand_tensor(&[1, 3], &mut rng);
    let b = n.backward(&c, &g, &mut Backprop::plain()).unwrap();
    let want = w.transpose().unwrap().matmul(&g.transpose().unwrap()).unwrap();
    assert_close(&b.input, &want.transpose().unwrap(), 1e-15);
}

#[test]
fn backward_rejects_mismatched_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut n = LayerNode::new(LayerKind::conv2d(1, 2, 3, 1, 1, 1, true), &mut rng);
    let (_, c) = n.forward(&Tensor::zeros(&[1, 1, 4, 4]), Mode::Eval).unwrap();
    let err = n
        .backward(&c, &Tensor::zeros(&[1, 2, 3, 3]), &mut Backprop::plain())
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let relu = LayerNode::new(LayerKind::Relu, &mut rng);
    assert!(matches!(
        relu.backward(&c, &Tensor::zeros(&[1]), &mut Backprop::plain()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn shape_rule_matches_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 1..4 {
        for s in 1..3 {
            for p in 0..2 {
                let kind = LayerKind::conv2d(2, 3, k, s, p, 1, true);
                let mut n = LayerNode::new(kind, &mut rng);
                let x = rand_tensor(&[1, 2, 7, 6], &mut rng);
                let want = kind.output_shape(x.shape()).unwrap();
                assert_eq!(run(&mut n, &x).shape(), want.as_slice());
                assert_eq!(want[2], (7 + 2 * p - k) / s + 1);
            }
        }
    }
}
