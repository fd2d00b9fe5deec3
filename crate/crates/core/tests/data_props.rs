use daunet::data::{
    apply_augment, augment, epoch_order, export_sample, gen_phantom, label_map, layout_masks, make_splits,
    phantom_layout, quadrant_mask, AugmentParams, Ellipse, PhantomConfig, PhantomLayout, Quadrant, Splits,
};
use daunet::metrics::BinaryMask;
use daunet::Tensor;
use proptest::prelude::*;

/// Counts pixel centres inside an axis-rotated ellipse by the implicit form
/// `(R(-theta) p)^T diag(1/ry^2, 1/rx^2) (R(-theta) p) <= 1`.
fn enumerated_count(e: &Ellipse, size: usize) -> usize {
    let (s, c) = e.theta.sin_cos();
    let (a, b) = (1.0 / (e.ry * e.ry), 1.0 / (e.rx * e.rx));
    // Quadratic-form coefficients of the rotated ellipse.
    let qyy = a * c * c + b * s * s;
    let qxx = a * s * s + b * c * c;
    let qxy = 2.0 * (a - b) * s * c;
    let mut n = 0;
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - e.cy, x as f64 + 0.5 - e.cx);
            if qyy * dy * dy + qxx * dx * dx + qxy * dy * dx <= 1.0 + 1e-12 {
                n += 1;
            }
        }
    }
    n
}

fn noiseless() -> PhantomConfig {
    PhantomConfig {
        noise_std: 0.0,
        speckle: false,
        ..PhantomConfig::default()
    }
}

#[test]
fn rasterization_matches_enumerated_count() {
    let known = Ellipse {
        cy: 30.25,
        cx: 33.5,
        ry: 14.0,
        rx: 9.5,
        theta: 0.6,
    };
    let layout = PhantomLayout {
        ellipses: vec![known],
        background: 0.2,
        intensities: vec![0.7],
    };
    let masks = layout_masks(&layout, 64);
    assert_eq!(masks[0].count(), enumerated_count(&known, 64));
    let cfg = PhantomConfig {
        num_fg_classes: 1,
        ..noiseless()
    };
    for i in 0..20 {
        let l = phantom_layout(&cfg, i);
        let s = gen_phantom(&cfg, i);
        assert_eq!(s.class_mask(0).count(), enumerated_count(&l.ellipses[0], 64), "sample {i}");
    }
}

#[test]
fn noiseless_image_is_piecewise_constant() {
    let cfg = noiseless();
    let s = gen_phantom(&cfg, 3);
    let l = phantom_layout(&cfg, 3);
    let (m0, m1) = (s.class_mask(0), s.class_mask(1));
    for y in 0..64 {
        for x in 0..64 {
            let want = if m1.get(y, x) {
                l.intensities[1]
            } else if m0.get(y, x) {
                l.intensities[0]
            } else {
                l.background
            };
            assert_eq!(s.image.data()[y * 64 + x], want);
        }
    }
}

#[test]
fn splits_and_shuffles() {
    let s = make_splits(200, 50, 50).unwrap();
    let all: Vec<u64> = s.train.clone().chain(s.val.clone()).chain(s.test.clone()).collect();
    assert_eq!(all, (0..300).collect::<Vec<_>>());
    assert!(Splits::from_ranges(0..10, 10..20, 15..30).is_err());
    assert_eq!(epoch_order(3, 1, 200), epoch_order(3, 1, 200));
    assert_ne!(epoch_order(3, 1, 200), epoch_order(3, 2, 200));
    assert_ne!(epoch_order(3, 1, 200), epoch_order(4, 1, 200));
}

#[test]
fn all_four_quadrants_clear_the_image() {
    let mut t = Tensor::ones(&[2, 1, 8, 6]);
    for q in Quadrant::ALL {
        t = quadrant_mask(&t, q).unwrap();
    }
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn label_map_levels() {
    let a = BinaryMask::from_fn(2, 2, |y, _| y == 0);
    let b = BinaryMask::from_fn(2, 2, |y, x| y == 1 && x == 1);
    assert_eq!(label_map(&[a, b]), vec![127, 127, 0, 255]);
}

#[test]
fn export_writes_image_and_class_planes() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen_phantom(&PhantomConfig::default(), 0);
    let files = export_sample(&s, dir.path(), "s0").unwrap();
    assert_eq!(files.len(), 3);
    let (w, h, px) = daunet::pgm::read_pgm(&files[1]).unwrap();
    assert_eq!((w, h), (64, 64));
    assert!(px.iter().all(|&v| v == 0 || v == 255));
    assert_eq!(px.iter().filter(|&&v| v == 255).count(), s.class_mask(0).count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn phantoms_are_deterministic_and_well_formed(seed in any::<u64>(), index in 0u64..10_000, two in any::<bool>()) {
        let cfg = PhantomConfig { seed, num_fg_classes: if two { 2 } else { 1 }, ..PhantomConfig::default() };
        let s = gen_phantom(&cfg, index);
        prop_assert_eq!(&s, &gen_phantom(&cfg, index));
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for c in 0..s.classes() {
            prop_assert!(s.class_present(c));
        }
        if two {
            let (a, b) = (s.class_mask(0), s.class_mask(1));
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| !(*x && *y)));
        }
    }

    #[test]
    fn augmentation_keeps_labels_binary_and_classes_present(seed in any::<u64>(), index in 0u64..1000) {
        let s = gen_phantom(&PhantomConfig::default(), index);
        let a = augment(&s, seed);
        prop_assert_eq!(&a, &augment(&s, seed));
        prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in 0..s.classes() {
            prop_assert!(a.class_present(c));
        }
    }

    #[test]
    fn identity_and_double_flip_are_exact(index in 0u64..1000) {
        let s = gen_phantom(&PhantomConfig::default(), index);
        prop_assert_eq!(&apply_augment(&s, &AugmentParams::IDENTITY), &s);
        let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        let once = apply_augment(&s, &flip);
        prop_assert_ne!(&once, &s);
        prop_assert_eq!(&apply_augment(&once, &flip), &s);
    }

    #[test]
    fn quadrant_mask_is_idempotent_and_local(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, qi in 0usize..4) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (2 * h, 2 * w);
        let x = Tensor::randn(&[2, 1, h, w], &mut rng);
        let q = Quadrant::ALL[qi];
        let once = quadrant_mask(&x, q).unwrap();
        prop_assert_eq!(&quadrant_mask(&once, q).unwrap(), &once);
        let (rows, cols) = q.region(h, w);
        for n in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    let inside = rows.contains(&y) && cols.contains(&xx);
                    let v = once.at(n, 0, y, xx);
                    prop_assert_eq!(v, if inside { 0.0 } else { x.at(n, 0, y, xx) });
                }
            }
        }
    }
}

#[test]
fn odd_dims_are_rejected() {
    assert!(quadrant_mask(&Tensor::ones(&[1, 1, 4, 5]), Quadrant::BR).is_err());
}
