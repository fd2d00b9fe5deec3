//! Component ablation and quadrant-occlusion robustness drivers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::trainer::{evaluate_logits, predict_dataset, train, TrainOutcome};
use crate::config::TrainConfig;
use crate::data::{quadrant_mask, Dataset, Quadrant};
use crate::deform::{export_offsets, OffsetField, DEFORM_KERNEL};
use crate::error::{Error, Result};
use crate::metrics::{Hd95Mode, MetricsReport};
use crate::model::Model;

/// Flag combinations in table order: baseline, SimAM only, bottleneck only,
/// both.
pub const ABLATION_FLAGS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

pub const ABLATION_CSV_HEADER: &str = "bottleneck,simam,dsc,hd95,asd,params";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub bottleneck: bool,
    pub simam: bool,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub params: usize,
}

impl AblationRow {
    /// Scores the best checkpoint of a finished run on `test`.
    pub fn from_outcome(outcome: &TrainOutcome, test: &Dataset, mode: Hd95Mode) -> Result<(Self, MetricsReport)> {
        let model = outcome.best_model()?;
        let report = evaluate_logits(&predict_dataset(&model, test, None)?, test, mode)?;
        let cfg = model.config();
        Ok((
            AblationRow {
                bottleneck: cfg.use_deform_bottleneck,
                simam: cfg.use_simam,
                dsc: report.mean_dsc(),
                hd95: report.mean_hd95(),
                asd: report.mean_asd(),
                params: model.param_count(),
            },
            report,
        ))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.bottleneck,
            r.simam,
            r.dsc,
            opt(r.hd95),
            opt(r.asd),
            r.params
        );
    }
    s
}

pub struct AblationRun {
    pub row: AblationRow,
    pub outcome: TrainOutcome,
}

/// Trains the four flag combinations of `base` with its seed and data, and
/// scores each best checkpoint on the test split.
pub fn run_ablation(base: &TrainConfig) -> Result<Vec<AblationRun>> {
    let test = Dataset::generate(&base.data, base.splits.splits()?.test);
    ABLATION_FLAGS
        .iter()
        .map(|&(b, s)| {
            let mut cfg = base.clone();
            cfg.model = cfg.model.with_flags(b, s);
            let outcome = train(&cfg)?;
            let (row, _) = AblationRow::from_outcome(&outcome, &test, base.hd95_mode)?;
            Ok(AblationRun { row, outcome })
        })
        .collect()
}

pub const ROBUSTNESS_CSV_HEADER: &str = "model,condition,mean_dsc,drop";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Condition {
    Clean,
    Masked(Quadrant),
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Clean,
        Condition::Masked(Quadrant::TL),
        Condition::Masked(Quadrant::TR),
        Condition::Masked(Quadrant::BL),
        Condition::Masked(Quadrant::BR),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Masked(q) => q.name(),
        }
    }

    fn quadrant(self) -> Option<Quadrant> {
        match self {
            Condition::Clean => None,
            Condition::Masked(q) => Some(q),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub model: String,
    pub condition: Condition,
    pub mean_dsc: f64,
    /// Clean mean DSC minus this condition's (0 for the clean row).
    pub drop: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RobustnessTable {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    /// Mean drop of `model` over the four occluded conditions.
    pub fn mean_drop(&self, model: &str) -> Option<f64> {
        let d: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.condition != Condition::Clean)
            .map(|r| r.drop)
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ROBUSTNESS_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.model, r.condition.name(), r.mean_dsc, r.drop);
        }
        s
    }
}

/// Scores `model` on `test` under each condition.
pub fn robustness_rows(name: &str, model: &Model, test: &Dataset, mode: Hd95Mode) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::with_capacity(Condition::ALL.len());
    let mut clean = 0.0;
    for cond in Condition::ALL {
        let logits = predict_dataset(model, test, cond.quadrant())?;
        let dsc = evaluate_logits(&logits, test, mode)?.mean_dsc();
        if cond == Condition::Clean {
            clean = dsc;
        }
        rows.push(RobustnessRow {
            model: name.to_string(),
            condition: cond,
            mean_dsc: dsc,
            drop: clean - dsc,
        });
    }
    Ok(rows)
}

/// Writes `offsets_<condition>.{csv,pgm}` for test sample `sample` of a model
/// with a deformable bottleneck; returns the written paths.
pub fn export_condition_offsets(model: &Model, test: &Dataset, sample: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let s = test
        .samples
        .get(sample)
        .ok_or_else(|| Error::invalid("export_offsets", format!("no test sample {sample}")))?;
    let (x, _) = Dataset::batch(&[s])?;
    let mut written = Vec::new();
    for cond in Condition::ALL {
        let input = match cond.quadrant() {
            Some(q) => quadrant_mask(&x, q)?,
            None => x.clone(),
        };
        let (_, offsets) = model.predict_with_offsets(&input)?;
        let offsets = offsets.ok_or_else(|| {
            Error::invalid("export_offsets", "model has no deformable bottleneck")
        })?;
        let field = OffsetField::new(offsets, DEFORM_KERNEL * DEFORM_KERNEL)?;
        let csv = dir.join(format!("offsets_{}.csv", cond.name()));
        let pgm = dir.join(format!("offsets_{}.pgm", cond.name()));
        export_offsets(&field, 0, &csv, &pgm)?;
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}

/// Both models on clean and occluded inputs; DAUNet offsets for the first
/// test sample go to `offsets_dir` when given.
pub fn run_robustness(
    daunet: &Model,
    unet: &Model,
    test: &Dataset,
    mode: Hd95Mode,
    offsets_dir: Option<&Path>,
) -> Result<(RobustnessTable, Vec<PathBuf>)> {
    let mut table = RobustnessTable::default();
    table.rows.extend(robustness_rows("daunet", daunet, test, mode)?);
    table.rows.extend(robustness_rows("unet", unet, test, mode)?);
    let written = match offsets_dir {
        Some(dir) => export_condition_offsets(daunet, test, 0, dir)?,
        None => Vec::new(),
    };
    Ok((table, written))
}
