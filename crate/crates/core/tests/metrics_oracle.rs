mod common;

use daunet::metrics::{asd, dsc, hd95, hd95_with, BinaryMask, Hd95Mode, MetricsReport, METRICS_CSV_HEADER};
use daunet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle_asd, oracle_dsc, oracle_hd95, oracle_hd95_pooled};

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.gen_range(0.05..0.9);
    if rng.gen_bool(0.5) {
        BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
    } else {
        // A filled ellipse gives long smooth boundaries.
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (ry, rx) = (rng.gen_range(0.5..h as f64), rng.gen_range(0.5..w as f64));
        BinaryMask::from_fn(h, w, |y, x| ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0)
    }
}

#[test]
fn randomized_pairs_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut scored = 0;
    while scored < 600 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let (p, g) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        assert!((dsc(&p, &g).unwrap() - oracle_dsc(&p, &g)).abs() <= 1e-9);
        if p.is_empty() || g.is_empty() {
            assert!(matches!(hd95(&p, &g), Err(Error::EmptyMask)));
            assert!(matches!(asd(&p, &g), Err(Error::EmptyMask)));
            continue;
        }
        assert!((hd95(&p, &g).unwrap() - oracle_hd95(&p, &g)).abs() <= 1e-9);
        assert!((hd95_with(&p, &g, Hd95Mode::Pooled).unwrap() - oracle_hd95_pooled(&p, &g)).abs() <= 1e-9);
        assert!((asd(&p, &g).unwrap() - oracle_asd(&p, &g)).abs() <= 1e-9);
        scored += 1;
    }
}

#[test]
fn identical_masks_score_perfectly() {
    let m = BinaryMask::from_fn(9, 7, |y, x| (2..7).contains(&y) && (1..5).contains(&x));
    assert_eq!(dsc(&m, &m).unwrap(), 1.0);
    assert_eq!(hd95(&m, &m).unwrap(), 0.0);
    assert_eq!(asd(&m, &m).unwrap(), 0.0);
}

#[test]
fn single_points_three_pixels_apart() {
    let a = BinaryMask::from_fn(8, 8, |y, x| (y, x) == (4, 1));
    let b = BinaryMask::from_fn(8, 8, |y, x| (y, x) == (4, 4));
    assert_eq!(dsc(&a, &b).unwrap(), 0.0);
    assert_eq!(hd95(&a, &b).unwrap(), 3.0);
    assert_eq!(asd(&a, &b).unwrap(), 3.0);
}

#[test]
fn metric_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (p, g) = (random_mask(&mut rng, 12, 12), random_mask(&mut rng, 12, 12));
        if p.is_empty() || g.is_empty() {
            continue;
        }
        assert_eq!(dsc(&p, &g).unwrap(), dsc(&g, &p).unwrap());
        assert_eq!(hd95(&p, &g).unwrap(), hd95(&g, &p).unwrap());
        assert!((asd(&p, &g).unwrap() - asd(&g, &p).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn report_csv_marks_skipped_rows() {
    let full = BinaryMask::from_fn(4, 4, |y, _| y < 2);
    let mut r = MetricsReport::default();
    r.push_pair(7, 0, &full, &full, Hd95Mode::DirectedMax).unwrap();
    r.push_pair(7, 1, &BinaryMask::empty(4, 4), &full, Hd95Mode::DirectedMax).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_CSV_HEADER);
    assert_eq!(lines[1], "7,0,1,0,0,0");
    assert_eq!(lines[2], "7,1,0,,,1");
    assert_eq!(r.skipped(), 1);
    assert_eq!(r.mean_dsc(), 0.5);
}
