use daunet::autograd::Conv2dParams;
use daunet::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct summation over the zero-padded input.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.nchw().unwrap();
    let (o, _, k, _) = w.nchw().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(oi, ci, ky, kx) * x.at(ni, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

fn naive_maxpool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.nchw().unwrap();
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(ni, ci, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(&[n, c, h / 2, w / 2], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_direct_summation(
        seed in any::<u64>(),
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
        bias in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, cin, h, w], &mut rng);
        let wt = Tensor::randn(&[cout, cin, k, k], &mut rng);
        let b = bias.then(|| Tensor::randn(&[cout], &mut rng));
        let got = Conv2dParams::new(wt.clone(), b.clone(), stride, pad).forward(&x).unwrap();
        let want = naive_conv(&x, &wt, b.as_ref(), stride, pad);
        prop_assert_eq!(got.dims(), want.dims());
        prop_assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv(
        seed in any::<u64>(),
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        ho in 2usize..6,
        k in prop::sample::select(vec![1usize, 2, 3]),
        stride in 1usize..3,
    ) {
        let pad = if k == 3 { 1 } else { 0 };
        // Input extent that conv maps exactly onto `ho` outputs.
        let h = (ho - 1) * stride + k - 2 * pad;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, cin, h, h], &mut rng);
        let y = Tensor::randn(&[n, cout, ho, ho], &mut rng);
        let wt = Tensor::randn(&[cout, cin, k, k], &mut rng);
        let p = Conv2dParams::new(wt, None, stride, pad);
        let ax = p.forward(&x).unwrap();
        let aty = p.forward_transposed(&y).unwrap();
        prop_assert_eq!(aty.dims(), x.dims());
        let lhs = ax.dot(&y);
        let rhs = x.dot(&aty);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn max_pool_matches_window_maximum(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, c, 2 * h, 2 * w], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.max_pool2d(v).unwrap();
        prop_assert_eq!(g.value(y), &naive_maxpool(&x));
    }

    #[test]
    fn conv2d_is_linear_in_its_input(seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = Tensor::randn(&[1, 2, 6, 6], &mut rng);
        let x2 = Tensor::randn(&[1, 2, 6, 6], &mut rng);
        let p = Conv2dParams::new(Tensor::randn(&[3, 2, 3, 3], &mut rng), None, 1, 1);
        let mix = Tensor::from_fn(&[1, 2, 6, 6], |i| a * x1.data()[i] + x2.data()[i]);
        let lhs = p.forward(&mix).unwrap();
        let (y1, y2) = (p.forward(&x1).unwrap(), p.forward(&x2).unwrap());
        let rhs = Tensor::from_fn(lhs.dims(), |i| a * y1.data()[i] + y2.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }
}

#[test]
fn shape_errors_name_the_dimension() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = g.constant(Tensor::zeros(&[3, 4, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");
}

#[test]
fn backward_accumulates_over_fan_out() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
    let y = g.mul(x, x).unwrap();
    let s = g.add(y, x).unwrap();
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -3.0]);
}
