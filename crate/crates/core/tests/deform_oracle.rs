mod common;

use daunet::autograd::Conv2dParams;
use daunet::deform::{bilinear_sample, export_offsets, read_offsets_csv, DeformConvParams, OffsetField};
use daunet::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bilinear, literal_deform, K, K2};

fn deform(x: &Tensor, off: &Tensor, m: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut g = Graph::new();
    let (xv, ov, mv, wv) = (
        g.constant(x.clone()),
        g.constant(off.clone()),
        g.constant(m.clone()),
        g.constant(w.clone()),
    );
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.deform_conv_sample(xv, ov, mv, wv, bv).unwrap();
    g.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn zero_offsets_unit_modulation_is_plain_conv(
        seed in any::<u64>(), n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 1usize..8, w in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, cin, h, w], &mut rng);
        let wt = Tensor::randn(&[cout, cin, K, K], &mut rng);
        let b = Tensor::randn(&[cout], &mut rng);
        let got = deform(&x, &Tensor::zeros(&[n, 2 * K2, h, w]), &Tensor::ones(&[n, K2, h, w]), &wt, Some(&b));
        let want = Conv2dParams::new(wt, Some(b), 1, 1).forward(&x).unwrap();
        prop_assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn fractional_offsets_match_literal_sum(
        seed in any::<u64>(), cin in 1usize..3, cout in 1usize..3, h in 2usize..7, w in 2usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, cin, h, w], &mut rng);
        let off = Tensor::uniform(&[2, 2 * K2, h, w], -2.5, 2.5, &mut rng);
        let m = Tensor::uniform(&[2, K2, h, w], 0.0, 1.0, &mut rng);
        let wt = Tensor::randn(&[cout, cin, K, K], &mut rng);
        let b = Tensor::randn(&[cout], &mut rng);
        let got = deform(&x, &off, &m, &wt, Some(&b));
        prop_assert!(got.max_abs_diff(&literal_deform(&x, &off, &m, &wt, &b)) <= 1e-12);
    }

    #[test]
    fn bilinear_is_exact_on_the_lattice_and_bounded_between(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(bilinear_sample(&plane, h, w, y as f64, x as f64), plane[y * w + x]);
            }
        }
        let (y, x) = (rng.gen_range(0.0..=(h - 1) as f64), rng.gen_range(0.0..=(w - 1) as f64));
        let v = bilinear_sample(&plane, h, w, y, x);
        prop_assert!((v - bilinear(&plane, h, w, y, x)).abs() <= 1e-14);
        let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(a, b), &p| (a.min(p), b.max(p)));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

#[test]
fn unit_vertical_offset_shifts_the_conv_by_one_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (6, 5);
    let x = Tensor::randn(&[1, 2, h, w], &mut rng);
    let wt = Tensor::randn(&[3, 2, K, K], &mut rng);
    let off = Tensor::from_fn(&[1, 2 * K2, h, w], |i| if (i / (h * w)) % 2 == 0 { 1.0 } else { 0.0 });
    let got = deform(&x, &off, &Tensor::ones(&[1, K2, h, w]), &wt, None);
    let conv = Conv2dParams::new(wt, None, 1, 1).forward(&x).unwrap();
    for o in 0..3 {
        for y in 0..h - 1 {
            for xx in 0..w {
                assert!((got.at(0, o, y, xx) - conv.at(0, o, y + 1, xx)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn zero_initialised_branch_gives_half_the_conv_plus_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = DeformConvParams::init(3, 4, &mut rng);
    p.main_bias = Tensor::randn(&[4], &mut rng);
    let x = Tensor::randn(&[2, 3, 7, 6], &mut rng);
    let (y, offsets, modulation) = p.forward(&x).unwrap();
    assert!(offsets.tensor().data().iter().all(|&v| v == 0.0));
    assert!(modulation.tensor().data().iter().all(|&v| v == 0.5));
    let conv = Conv2dParams::new(p.main_weight.clone(), None, 1, 1).forward(&x).unwrap();
    let (_, _, h, w) = conv.nchw().unwrap();
    let want = Tensor::from_fn(conv.dims(), |i| 0.5 * conv.data()[i] + p.main_bias.data()[(i / (h * w)) % 4]);
    assert!(y.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn offsets_round_trip_through_csv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::uniform(&[1, 2 * K2, 4, 3], -1.0, 1.0, &mut rng);
    let field = OffsetField::new(t.clone(), K2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, pgm) = (dir.path().join("o.csv"), dir.path().join("o.pgm"));
    export_offsets(&field, 0, &csv, &pgm).unwrap();
    assert_eq!(read_offsets_csv(&csv).unwrap().tensor(), &t);
    let img = daunet::pgm::read_pgm(&pgm).unwrap();
    assert_eq!((img.0, img.1), (3, 4));
}
