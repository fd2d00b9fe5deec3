mod common;

use daunet::model::{build_daunet, ModelConfig};
use daunet::simam::{attend, attention_weights, energy, SimamConfig};
use daunet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::literal_energy;

/// Largest `1 / (E + eps)` for which `sigmoid` is still below 1 in f64.
const SIGMOID_BELOW_ONE: f64 = 36.0;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_matches_leave_one_out_definition(
        seed in any::<u64>(), c in 1usize..3, h in 1usize..7, w in 2usize..7,
        scale in prop::sample::select(vec![1e-3, 1.0, 50.0]),
        shift in -100.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, c, h, w], &mut rng).map(|v| v * scale + shift);
        let cfg = SimamConfig::default();
        let e = energy(&x, &cfg).unwrap();
        let want = literal_energy(&x, cfg.lambda);
        for (a, b) in e.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn weights_stay_in_the_open_interval(
        seed in any::<u64>(), h in 2usize..7, w in 2usize..7,
        scale in prop::sample::select(vec![0.1, 1.0, 10.0, 100.0]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[1, 3, h, w], &mut rng).map(|v| v * scale);
        let cfg = SimamConfig::default();
        let a = attention_weights(&x, &cfg).unwrap();
        let e = energy(&x, &cfg).unwrap();
        for (&ai, &ei) in a.data().iter().zip(e.data()) {
            prop_assert!(ai > 0.5 && ai <= 1.0);
            if 1.0 / (ei + cfg.epsilon) <= SIGMOID_BELOW_ONE {
                prop_assert!(ai < 1.0);
            }
        }
    }
}

#[test]
fn two_by_two_hand_case() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let cfg = SimamConfig::default();
    let e = energy(&x, &cfg).unwrap();
    assert!((e.data()[0] - 4.0002).abs() < 1e-12);
    let a = attention_weights(&x, &cfg).unwrap();
    let expect = 1.0 / (1.0 + (-1.0 / (4.0002 + 1e-8f64)).exp());
    assert!((a.data()[0] - expect).abs() < 1e-15);
    assert!((a.data()[0] - 0.5622).abs() < 1e-4);
}

#[test]
fn constant_plane_gets_unit_weights_and_passes_through() {
    let x = Tensor::full(&[2, 3, 4, 5], 0.7);
    let cfg = SimamConfig::default();
    let a = attention_weights(&x, &cfg).unwrap();
    assert!(a.data().iter().all(|&v| (v - 1.0).abs() <= 1e-30));
    assert_eq!(attend(&x, &cfg).unwrap(), x);
}

#[test]
fn single_neuron_plane_is_rejected() {
    assert!(energy(&Tensor::zeros(&[1, 1, 1, 1]), &SimamConfig::default()).is_err());
}

#[test]
fn toggling_simam_adds_no_parameters() {
    for deform in [false, true] {
        let with = build_daunet(&ModelConfig::desk().with_flags(deform, true), 0).unwrap();
        let without = build_daunet(&ModelConfig::desk().with_flags(deform, false), 0).unwrap();
        assert_eq!(with.param_count(), without.param_count());
        assert!(with.param_names().eq(without.param_names()));
    }
}
