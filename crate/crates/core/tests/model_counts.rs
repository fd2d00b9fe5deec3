use std::collections::HashSet;

use daunet::model::{build_daunet, build_unet, ModelConfig};
use daunet::Tensor;

/// Hand-enumerated parameter count of a depth-4 UNet: two 3x3 conv+BN per
/// stage, 2x2 transposed-conv upsampling, 1x1 head.
fn enumerate_unet(base: usize, cin: usize, classes: usize) -> usize {
    let conv = |i: usize, o: usize, k: usize, bias: bool| i * o * k * k + if bias { o } else { 0 };
    let bn = |c: usize| 2 * c;
    let double = |i: usize, o: usize| conv(i, o, 3, false) + bn(o) + conv(o, o, 3, false) + bn(o);
    let ch = |s: usize| base << (s - 1);
    let mut total = 0;
    let mut prev = cin;
    for s in 1..=4 {
        total += double(prev, ch(s));
        prev = ch(s);
    }
    total += double(ch(4), ch(5));
    for s in (1..=4).rev() {
        total += conv(ch(s + 1), ch(s), 2, true);
        total += double(2 * ch(s), ch(s));
    }
    total + conv(base, classes, 1, true)
}

/// Same network with the bottleneck replaced by 1x1 compression to a quarter
/// of the bottleneck width, a 3x3 deformable conv with its offset branch, and a
/// 1x1 expansion back to the bottleneck width.
fn enumerate_daunet(base: usize, cin: usize, classes: usize) -> usize {
    let ch = |s: usize| base << (s - 1);
    let (cenc, cb) = (ch(4), ch(5));
    let q = cb / 4;
    let plain_bottleneck = cenc * cb * 9 + 2 * cb + cb * cb * 9 + 2 * cb;
    let deform_bottleneck = cenc * q + 2 * q          // compress + BN
        + q * q * 9 + q                                // deform weight + bias
        + 27 * q * 9 + 27                              // offset/modulation branch
        + 2 * q                                        // BN
        + q * cb + 2 * cb; // expand + BN
    enumerate_unet(base, cin, classes) - plain_bottleneck + deform_bottleneck
}

#[test]
fn full_scale_counts() {
    let cfg = ModelConfig::full();
    let unet = build_unet(&cfg.clone().with_flags(false, false), 0).unwrap();
    let daunet = build_daunet(&cfg, 0).unwrap();
    assert_eq!(unet.param_count(), enumerate_unet(64, 1, 1));
    assert_eq!(unet.param_count(), 31_036_481);
    assert!((unet.param_count() as f64 / 31.03e6 - 1.0).abs() <= 0.02);
    assert_eq!(daunet.param_count(), enumerate_daunet(64, 1, 1));
    assert_eq!(daunet.param_count(), 17_925_212);
    assert!(unet.param_count() - daunet.param_count() >= 8_000_000);
}

#[test]
fn desk_scale_counts() {
    let cfg = ModelConfig::desk();
    assert_eq!(build_daunet(&cfg.clone().with_flags(false, false), 0).unwrap().param_count(), enumerate_unet(16, 1, 2));
    assert_eq!(build_daunet(&cfg, 0).unwrap().param_count(), enumerate_daunet(16, 1, 2));
}

#[test]
fn unet_builder_rejects_daunet_flags() {
    assert!(build_unet(&ModelConfig::desk(), 0).is_err());
}

#[test]
fn names_are_unique_and_stable() {
    let cfg = ModelConfig::desk();
    let a = build_daunet(&cfg, 1).unwrap();
    let b = build_daunet(&cfg, 2).unwrap();
    let names: HashSet<&str> = a.param_names().collect();
    assert_eq!(names.len(), a.params().len());
    assert!(a.param_names().eq(b.param_names()));
    assert_ne!(a.params(), b.params());
    assert_eq!(a, build_daunet(&cfg, 1).unwrap());
}

#[test]
fn shared_layers_start_identical_across_variants() {
    let cfg = ModelConfig::desk();
    let full = build_daunet(&cfg, 4).unwrap();
    let base = build_daunet(&cfg.clone().with_flags(false, false), 4).unwrap();
    for (name, t) in base.params() {
        if let Some(u) = full.params().get(name) {
            assert_eq!(t, u, "{name}");
        }
    }
}

#[test]
fn logits_have_one_plane_per_class() {
    let cfg = ModelConfig {
        base_channels: 4,
        ..ModelConfig::desk()
    };
    for (d, s) in [(false, false), (true, true)] {
        let m = build_daunet(&cfg.clone().with_flags(d, s), 0).unwrap();
        let y = m.predict(&Tensor::zeros(&[2, 1, 64, 64])).unwrap();
        assert_eq!(y.dims(), &[2, 2, 64, 64]);
        assert!(m.predict(&Tensor::zeros(&[1, 1, 48, 48])).is_err());
    }
}

#[test]
fn summary_lists_blocks_that_sum_to_the_total() {
    let m = build_daunet(&ModelConfig::desk(), 0).unwrap();
    let blocks = m.blocks();
    assert_eq!(blocks.iter().map(|b| b.params).sum::<usize>(), m.param_count());
    assert!(m.summary().contains(&m.param_count().to_string()));
}
