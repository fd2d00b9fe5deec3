use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::adam::{AdamHyper, AdamState};
use super::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{augment, epoch_order, quadrant_mask, Dataset, Quadrant, Sample};
use crate::error::{Error, Result};
use crate::metrics::{binarize, BinaryMask, Hd95Mode, MetricsReport};
use crate::model::{build_daunet, Mode, Model};
use crate::rng::mix64;
use crate::tensor::Tensor;
use crate::Graph;

pub const LOG_CSV_HEADER: &str = "epoch,step,train_loss,val_dsc";

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 10;

/// One optimisation step; `val_dsc` is set on the last step of each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }

    pub fn val_dsc(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.val_dsc).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_CSV_HEADER}\n");
        for r in &self.rows {
            let v = r.val_dsc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{v}", r.epoch, r.step, r.train_loss);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    /// Model after the final epoch.
    pub model: Model,
    /// Snapshot at the epoch with the best validation mean DSC.
    pub best: Checkpoint,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Result<Model> {
        self.best.to_model()
    }
}

/// Builds the model and datasets described by `cfg` and trains it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = cfg.splits.splits()?;
    let train_set = Dataset::generate(&cfg.data, splits.train);
    let val_set = Dataset::generate(&cfg.data, splits.val);
    let mut model = build_daunet(&cfg.model, cfg.seed)?;
    fit(&mut model, cfg, &train_set, &val_set, &mut |_| {})
}

/// Seed for augmenting dataset item `item` in `epoch`.
fn augment_seed(seed: u64, epoch: usize, item: u64) -> u64 {
    mix64(seed ^ mix64((epoch as u64) << 32 ^ item))
}

/// Runs `cfg.epochs` epochs of Adam on `model` in place. Only the learning
/// rate is read unchecked (so `lr = 0` is allowed here); `on_step` sees each
/// log row as it is produced.
pub fn fit(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    on_step: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config(
            "fit needs training samples, batch_size >= 1 and lr >= 0".into(),
        ));
    }
    let mut adam = AdamState::new(model.params(), AdamHyper::default());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch as u64, train_set.len());
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, chunk) in batches.iter().enumerate() {
            let owned: Vec<Sample>;
            let refs: Vec<&Sample> = if cfg.augment {
                owned = chunk
                    .iter()
                    .map(|&i| {
                        let s = &train_set.samples[i];
                        augment(s, augment_seed(cfg.seed, epoch, train_set.indices[i]))
                    })
                    .collect();
                owned.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set.samples[i]).collect()
            };
            let (x, y) = Dataset::batch(&refs)?;
            let loss = train_step(model, &mut adam, &x, &y, cfg)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        loss,
                    },
                    other => other,
                })?;
            step += 1;
            let last = bi + 1 == batches.len();
            let val_dsc = if last {
                Some(evaluate(model, val_set, cfg.hd95_mode)?.mean_dsc())
            } else {
                None
            };
            let row = LogRow {
                epoch,
                step,
                train_loss: loss,
                val_dsc,
            };
            on_step(&row);
            log.rows.push(row);
            if let Some(v) = val_dsc {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    let mut c = Checkpoint::from_model(model, epoch, Some(&adam));
                    c.metrics.insert("val_dsc".into(), v);
                    best = Some((v, c));
                }
            }
        }
    }
    let (_, best) = best.unwrap_or_else(|| (0.0, Checkpoint::from_model(model, 0, Some(&adam))));
    Ok(TrainOutcome {
        model: model.clone(),
        best,
        log,
    })
}

/// Forward, hybrid loss, backward and one Adam update; returns the loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (grads, stats, loss) = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv, Mode::Train, true)?;
        let lv = g.hybrid_loss(out.logits, y, &cfg.loss)?;
        let loss = g.value(lv).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                loss,
            });
        }
        let mut gr = g.backward(lv)?;
        let grads: IndexMap<String, Tensor> = out
            .params
            .iter()
            .map(|(n, v)| {
                let t = gr
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).dims()));
                (n.clone(), t)
            })
            .collect();
        (grads, out.bn_stats, loss)
    };
    adam.step(model.params_mut(), &grads, cfg.lr)?;
    model.apply_bn_stats(&stats);
    Ok(loss)
}

/// Eval-mode logits for every sample, optionally with one quadrant removed
/// from the input.
pub fn predict_dataset(model: &Model, data: &Dataset, occlude: Option<Quadrant>) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (mut x, _) = Dataset::batch(&refs)?;
        if let Some(q) = occlude {
            x = quadrant_mask(&x, q)?;
        }
        let logits = model.predict(&x)?;
        for n in 0..chunk.len() {
            out.push(logits.batch_item(n)?);
        }
    }
    Ok(out)
}

/// Scores per-sample logits `(1, C, H, W)` against the dataset masks.
pub fn evaluate_logits(logits: &[Tensor], data: &Dataset, mode: Hd95Mode) -> Result<MetricsReport> {
    if logits.len() != data.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} samples", logits.len(), data.len()),
        ));
    }
    let mut report = MetricsReport::default();
    for ((l, s), &id) in logits.iter().zip(&data.samples).zip(&data.indices) {
        let pred = binarize(l)?.remove(0);
        if pred.len() != s.classes() {
            return Err(Error::shape(
                "evaluate",
                format!("model predicts {} classes, data has {}", pred.len(), s.classes()),
            ));
        }
        for (c, p) in pred.iter().enumerate() {
            let truth = s.class_mask(c);
            report.push_pair(id as usize, c, p, &truth, mode)?;
        }
    }
    Ok(report)
}

pub fn evaluate(model: &Model, data: &Dataset, mode: Hd95Mode) -> Result<MetricsReport> {
    evaluate_logits(&predict_dataset(model, data, None)?, data, mode)
}

/// Binarized predictions of one sample's logits, one mask per class.
pub fn predicted_masks(logits: &Tensor) -> Result<Vec<BinaryMask>> {
    Ok(binarize(logits)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            rows: vec![
                LogRow {
                    epoch: 1,
                    step: 1,
                    train_loss: 0.5,
                    val_dsc: None,
                },
                LogRow {
                    epoch: 1,
                    step: 2,
                    train_loss: 0.25,
                    val_dsc: Some(0.75),
                },
            ],
        };
        assert_eq!(log.to_csv(), "epoch,step,train_loss,val_dsc\n1,1,0.5,\n1,2,0.25,0.75\n");
    }
}
