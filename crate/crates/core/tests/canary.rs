use daunet::config::TrainConfig;
use daunet::data::Dataset;
use daunet::model::build_daunet;
use daunet::train::fit;

const STEPS: usize = 200;
const WINDOW: usize = 20;
const FINAL_LOSS: f64 = 0.05;
/// At the training rate of 1e-4 the loss is still near 1.5 after 200 steps.
const CANARY_LR: f64 = 1e-2;

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[mid - 1] + s[mid])
    } else {
        s[mid]
    }
}

#[test]
fn one_sample_is_memorised() {
    let cfg = TrainConfig {
        epochs: STEPS,
        batch_size: 1,
        augment: false,
        lr: CANARY_LR,
        ..TrainConfig::desk()
    };
    let data = Dataset::generate(&cfg.data, 0..1);
    let mut model = build_daunet(&cfg.model, cfg.seed).unwrap();
    let out = fit(&mut model, &cfg, &data, &data, &mut |_| {}).unwrap();
    let losses = out.log.losses();
    assert_eq!(losses.len(), STEPS);

    let medians: Vec<f64> = losses.chunks(WINDOW).map(median).collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "not decreasing: {medians:?}");
    let last = *losses.last().unwrap();
    assert!(last < FINAL_LOSS, "final loss {last}");
}
