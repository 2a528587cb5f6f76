use pam_tensor::{Graph, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Direct six-loop convolution with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = *x.shape() else { panic!() };
    let [o, _, k, _] = *w.shape() else { panic!() };
    let p = (k - 1) / 2;
    let ho = (h + 2 * p - k) / stride + 1;
    let wo = (wd + 2 * p - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - p as isize;
                                let ix = (xo * stride + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    (vec![n, o, ho, wo], out)
}

#[test]
fn conv2d_identity_delta_kernel() {
    let x = Tensor::<f64>::uniform(vec![1, 1, 3, 3], -1.0, 1.0, &mut rng(1));
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.input(x.clone()), g.input(k));
    let y = g.conv2d(xv, kv, None, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_zero_weights_give_zero() {
    let x = Tensor::<f32>::uniform(vec![2, 3, 5, 4], -1.0, 1.0, &mut rng(2));
    let mut g = Graph::new();
    let xv = g.input(x);
    let w = g.input(Tensor::zeros(vec![4, 3, 3, 3]));
    let b = g.input(Tensor::zeros(vec![4]));
    let y = g.conv2d(xv, w, Some(b), 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_stride2_matches_direct_convolution() {
    let mut r = rng(3);
    let x = Tensor::<f64>::uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::uniform(vec![3], -1.0, 1.0, &mut r);
    let (shape, expected) = naive_conv(&x, &w, Some(b.data()), 2);
    assert_eq!(shape, vec![1, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(xv, wv, Some(bv), 2).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3, 3]);
    assert!(max_abs_diff(g.value(y).data(), &expected) < 1e-9);
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(vec![3, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1), Err(TensorError::ShapeMismatch { .. })));
    let tiny = g.input(Tensor::zeros(vec![1, 1, 1, 1]));
    let w2 = g.input(Tensor::zeros(vec![1, 1, 2, 2]));
    assert!(matches!(g.conv2d(tiny, w2, None, 2), Err(TensorError::NonPositiveSize { .. })));
}

#[test]
fn conv_transpose_of_scalar_with_ones_kernel() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(vec![1, 1, 1, 1], 2.5));
    let w = g.input(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = g.conv_transpose2d(x, w, None).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));

    let z = g.input(Tensor::zeros(vec![1, 1, 3, 2]));
    let w2 = g.input(Tensor::full(vec![1, 3, 2, 2], 0.3));
    let y2 = g.conv_transpose2d(z, w2, None).unwrap();
    assert_eq!(g.shape(y2), &[1, 3, 6, 4]);
    assert!(g.value(y2).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv_matrix() {
    // Build the dense matrix of the 2x2/stride-2 convolution that maps
    // [1, O, 2H, 2W] -> [1, I, H, W] with the same weights, then apply its transpose.
    let mut r = rng(4);
    let (i_ch, o_ch, h, w) = (2, 3, 3, 3);
    let x = Tensor::<f64>::uniform(vec![1, i_ch, h, w], -1.0, 1.0, &mut r);
    let weight = Tensor::<f64>::uniform(vec![i_ch, o_ch, 2, 2], -1.0, 1.0, &mut r);
    let in_len = o_ch * 4 * h * w;
    let out_len = i_ch * h * w;
    let mut matrix = vec![0.0; out_len * in_len];
    for col in 0..in_len {
        let mut basis = Tensor::zeros(vec![1, o_ch, 2 * h, 2 * w]);
        basis.data_mut()[col] = 1.0;
        let (_, y) = naive_conv(&basis, &weight, None, 2);
        for row in 0..out_len {
            matrix[row * in_len + col] = y[row];
        }
    }
    let expected: Vec<f64> = (0..in_len)
        .map(|col| (0..out_len).map(|row| matrix[row * in_len + col] * x.data()[row]).sum())
        .collect();
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x), g.input(weight));
    let y = g.conv_transpose2d(xv, wv, None).unwrap();
    assert_eq!(g.shape(y), &[1, o_ch, 2 * h, 2 * w]);
    assert!(max_abs_diff(g.value(y).data(), &expected) < 1e-9);
}

#[test]
fn instance_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(vec![1, 1, 2, 2], 3.0));
    let one = g.input(Tensor::full(vec![1], 1.0));
    let zero = g.input(Tensor::zeros(vec![1]));
    let y = g.instance_norm(x, one, zero, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let any = g.input(Tensor::new(vec![1, 1, 2, 2], vec![0.3, -2.0, 7.0, 1.0]).unwrap());
    let b = g.input(Tensor::full(vec![1], 0.25));
    let y = g.instance_norm(any, zero, b, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.25));

    let ramp = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.instance_norm(ramp, one, zero, 1e-12).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 4.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![3, 4], vec![0.0, 0.0, 0.0, 0.0, 7.5, 7.5, 7.5, 7.5, 1000.0, 0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let d = g.value(y).data();
    assert!(d[..8].iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!((d[8] - 1.0).abs() < 1e-12 && d[9..].iter().all(|&v| v.is_finite() && v < 1e-12));

    let pair = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax_rows(pair).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_examples() {
    let mut r = rng(5);
    let a = Tensor::<f64>::uniform(vec![4, 3], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::uniform(vec![3, 5], -1.0, 1.0, &mut r);
    let mut expected = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            for k in 0..3 {
                expected[i * 5 + j] += a.data()[i * 3 + k] * b.data()[k * 5 + j];
            }
        }
    }
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (av, bv, iv) = (g.input(a.clone()), g.input(b), g.input(eye));
    let c = g.matmul(av, bv).unwrap();
    assert!(max_abs_diff(g.value(c).data(), &expected) < 1e-12);
    let same = g.matmul(av, iv).unwrap();
    assert_eq!(g.value(same), &a.clone().reshape(vec![4, 3]).unwrap());
    let zeros = g.input(Tensor::zeros(vec![3, 2]));
    let z = g.matmul(av, zeros).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    assert!(matches!(g.matmul(av, av), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap());
    let lr = g.leaky_relu(x, 0.01).unwrap();
    assert!((g.value(lr).data()[0] + 0.01).abs() < 1e-15);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[1], 0.5);

    let img = Tensor::<f64>::uniform(vec![1, 2, 5, 7], -1.0, 1.0, &mut rng(6));
    let iv = g.input(img.clone());
    let same = g.resize_bilinear(iv, 5, 7).unwrap();
    assert_eq!(g.value(same), &img);
    assert!(matches!(g.resize_bilinear(iv, 0, 3), Err(TensorError::NonPositiveSize { .. })));
}

#[test]
fn backward_simple_losses() {
    let x0 = Tensor::<f64>::uniform(vec![2, 3], -1.0, 1.0, &mut rng(7));
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    for (gv, xv) in grads.get(x).unwrap().data().iter().zip(x0.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(vec![3]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let other = {
        let mut h = Graph::<f32>::new();
        let a = h.param(Tensor::zeros(vec![1]));
        let b = h.param(Tensor::zeros(vec![1]));
        h.add(a, b).unwrap()
    };
    let _ = other;
    let empty = Graph::<f32>::new();
    assert!(matches!(empty.backward(x), Err(TensorError::UnknownVar(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(vec![2], f32::MAX));
    assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(8);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut r));
        let w = g.param(Tensor::uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut r));
        let gamma = g.param(Tensor::full(vec![4], 1.0));
        let beta = g.param(Tensor::zeros(vec![4]));
        let y = g.conv2d(x, w, None, 2).unwrap();
        let y = g.instance_norm(y, gamma, beta, 1e-5).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn leaf_fed_twice_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
    let a = g.scale(x, 2.0).unwrap();
    let b = g.add(a, x).unwrap();
    let s = g.sum(b).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn batched_convolutions_match_per_sample_bitwise() {
    let mut r = rng(21);
    for (size, stride, k) in [(8, 1, 3), (8, 2, 3), (6, 1, 1), (20, 1, 3), (40, 2, 3)] {
        let x = Tensor::<f32>::uniform(vec![5, 3, size, size], -1.0, 1.0, &mut r);
        let w = Tensor::<f32>::uniform(vec![4, 3, k, k], -1.0, 1.0, &mut r);
        let wt = Tensor::<f32>::uniform(vec![3, 4, 2, 2], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::uniform(vec![4], -1.0, 1.0, &mut r);
        let run = |x: Tensor<f32>| {
            let mut g = Graph::<f32>::new();
            let (x, w, wt, b) = (g.input(x), g.input(w.clone()), g.input(wt.clone()), g.input(b.clone()));
            let y = g.conv2d(x, w, Some(b), stride).unwrap();
            let t = g.conv_transpose2d(x, wt, Some(b)).unwrap();
            (g.value(y).data().to_vec(), g.value(t).data().to_vec())
        };
        let (all_y, all_t) = run(x.clone());
        let per = 3 * size * size;
        for i in 0..5 {
            let one = Tensor::new(vec![1, 3, size, size], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let (y, t) = run(one);
            assert_eq!(y, all_y[i * y.len()..(i + 1) * y.len()], "conv {size} {stride} {k}");
            assert_eq!(t, all_t[i * t.len()..(i + 1) * t.len()], "conv_t {size}");
        }
    }
}
