use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use daunet::config::TrainConfig;
use daunet::data::{export_sample, label_map, Dataset};
use daunet::gradcheck::run_suite;
use daunet::model::build_daunet;
use daunet::pgm::write_pgm;
use daunet::train::{
    ablation_csv, evaluate_logits, export_condition_offsets, load_checkpoint, predict_dataset, predicted_masks,
    run_ablation, run_robustness, save_checkpoint, train, Checkpoint,
};

use crate::manifest::RunManifest;
use crate::{Command, Common};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<ExitCode, Failure>;

pub const SEED_ENV: &str = "DAUNET_SEED";

/// Config resolution order: profile, `--config` file, `DAUNET_SEED`, `--set`.
fn resolve(common: &Common, require_file: bool) -> Result<TrainConfig, Failure> {
    let usage = |e: daunet::Error| Failure::Usage(e.to_string());
    let base = TrainConfig::profile(&common.profile).map_err(usage)?;
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p, &base).map_err(|e| match e {
            daunet::Error::Io { .. } => Failure::Runtime(e.into()),
            other => usage(other),
        })?,
        None if require_file => return Err(Failure::Usage("--config <FILE> is required".into())),
        None => base,
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
    }
    let cfg = cfg.with_overrides(&common.overrides).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> anyhow::Result<PathBuf> {
    let dir = common.out_dir.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string())
    });
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn manifest(name: &str, cfg: &TrainConfig) -> RunManifest {
    RunManifest::new(name, serde_json::to_value(cfg).expect("config serializes"), cfg.seed)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save(ckpt: &Checkpoint, dir: &Path, name: &str, m: &mut RunManifest) -> anyhow::Result<()> {
    let path = dir.join(name);
    save_checkpoint(ckpt, &path)?;
    m.checkpoint(dir, &path, &ckpt.to_bytes());
    Ok(())
}

/// Loads a checkpoint and checks it against the configured model.
fn load_model(path: &Path, cfg: &TrainConfig) -> Result<daunet::model::Model, Failure> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model_config.image_size != cfg.data.image_size || ckpt.model_config.num_classes != cfg.data.num_fg_classes
    {
        return Err(Failure::Runtime(anyhow!(
            "{}: checkpoint expects {}x{} inputs with {} classes, data config has {} and {}",
            path.display(),
            ckpt.model_config.image_size,
            ckpt.model_config.image_size,
            ckpt.model_config.num_classes,
            cfg.data.image_size,
            cfg.data.num_fg_classes
        )));
    }
    Ok(ckpt.to_model()?)
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Generate { common, limit } => generate(&common, limit),
        Command::Train { common } => train_cmd(&common),
        Command::Eval {
            common,
            checkpoint,
            split,
            export_masks,
        } => eval(&common, &checkpoint, &split, export_masks),
        Command::Ablate { common } => ablate(&common),
        Command::Robustness { common, daunet, unet } => robustness(&common, &daunet, &unet),
        Command::GradCheck { seeds } => grad_check(&seeds),
        Command::ExportOffsets {
            common,
            checkpoint,
            sample,
        } => export_offsets(&common, &checkpoint, sample),
        Command::Info { common } => info(&common),
    }
}

fn generate(common: &Common, limit: usize) -> Outcome {
    let cfg = resolve(common, true)?;
    let dir = out_dir(common)?;
    let mut m = manifest("generate", &cfg);
    let splits = cfg.splits.splits()?;
    for (name, range) in [("train", splits.train), ("val", splits.val), ("test", splits.test)] {
        for i in range.take(limit) {
            let s = daunet::data::gen_phantom(&cfg.data, i);
            for p in export_sample(&s, &dir, &format!("{name}_{i:04}"))? {
                m.output(&dir, &p);
            }
        }
    }
    let n = m.outputs.len();
    m.write(&dir)?;
    println!("wrote {n} PGM files to {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(common: &Common) -> Outcome {
    let cfg = resolve(common, true)?;
    let dir = out_dir(common)?;
    let mut m = manifest("train", &cfg);
    let out = train(&cfg)?;
    let log = dir.join("log.csv");
    out.log.write_csv(&log)?;
    m.output(&dir, &log);
    save(&out.best, &dir, "best.ckpt", &mut m)?;
    m.param_counts.insert("model".into(), out.model.param_count());
    let val = out.best.metrics.get("val_dsc").copied().unwrap_or(0.0);
    m.write(&dir)?;
    println!(
        "best epoch {} (val mean DSC {val:.4}); outputs in {}",
        out.best.epoch,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(common: &Common, checkpoint: &Path, split: &str, export_masks: usize) -> Outcome {
    let cfg = resolve(common, true)?;
    let model = load_model(checkpoint, &cfg)?;
    let dir = out_dir(common)?;
    let mut m = manifest("eval", &cfg);
    m.param_counts.insert("model".into(), model.param_count());
    let splits = cfg.splits.splits()?;
    let range = match split {
        "train" => splits.train,
        "val" => splits.val,
        _ => splits.test,
    };
    let data = Dataset::generate(&cfg.data, range);
    let logits = predict_dataset(&model, &data, None)?;
    let report = evaluate_logits(&logits, &data, cfg.hd95_mode)?;
    let csv = dir.join("metrics.csv");
    report.write_csv(&csv)?;
    m.output(&dir, &csv);
    let size = cfg.data.image_size;
    for (k, l) in logits.iter().enumerate().take(export_masks) {
        let id = data.indices[k];
        let truth: Vec<_> = (0..data.samples[k].classes()).map(|c| data.samples[k].class_mask(c)).collect();
        for (tag, masks) in [("pred", predicted_masks(l)?), ("truth", truth)] {
            let p = dir.join(format!("{tag}_{id:04}.pgm"));
            write_pgm(&p, size, size, &label_map(&masks))?;
            m.output(&dir, &p);
        }
    }
    m.write(&dir)?;
    println!(
        "{split}: mean DSC {:.4}, HD95 {}, ASD {} ({} skipped rows)",
        report.mean_dsc(),
        fmt_opt(report.mean_hd95()),
        fmt_opt(report.mean_asd()),
        report.skipped()
    );
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn ablate(common: &Common) -> Outcome {
    let cfg = resolve(common, true)?;
    let dir = out_dir(common)?;
    let mut m = manifest("ablate", &cfg);
    let runs = run_ablation(&cfg)?;
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    for r in &runs {
        let tag = format!("b{}_s{}", r.row.bottleneck as u8, r.row.simam as u8);
        let log = dir.join(format!("log_{tag}.csv"));
        r.outcome.log.write_csv(&log)?;
        m.output(&dir, &log);
        save(&r.outcome.best, &dir, &format!("best_{tag}.ckpt"), &mut m)?;
        m.param_counts.insert(tag, r.row.params);
    }
    let csv = dir.join("ablation.csv");
    let text = ablation_csv(&rows);
    write(&csv, &text)?;
    m.output(&dir, &csv);
    m.write(&dir)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn robustness(common: &Common, daunet_ckpt: &Path, unet_ckpt: &Path) -> Outcome {
    let cfg = resolve(common, true)?;
    let daunet = load_model(daunet_ckpt, &cfg)?;
    let unet = load_model(unet_ckpt, &cfg)?;
    if !daunet.config().use_deform_bottleneck {
        return Err(Failure::Usage(format!(
            "{} has no deformable bottleneck; pass the DAUNet checkpoint to --daunet",
            daunet_ckpt.display()
        )));
    }
    let dir = out_dir(common)?;
    let mut m = manifest("robustness", &cfg);
    m.param_counts.insert("daunet".into(), daunet.param_count());
    m.param_counts.insert("unet".into(), unet.param_count());
    let test = Dataset::generate(&cfg.data, cfg.splits.splits()?.test);
    let (table, written) = run_robustness(&daunet, &unet, &test, cfg.hd95_mode, Some(&dir))?;
    let csv = dir.join("robustness.csv");
    write(&csv, &table.to_csv())?;
    m.output(&dir, &csv);
    for p in &written {
        m.output(&dir, p);
    }
    m.write(&dir)?;
    print!("{}", table.to_csv());
    for name in ["daunet", "unet"] {
        println!("{name}: mean drop {:.4}", table.mean_drop(name).unwrap_or(f64::NAN));
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(seeds: &[u64]) -> Outcome {
    if seeds.is_empty() {
        return Err(Failure::Usage("--seeds needs at least one seed".into()));
    }
    let results = run_suite(seeds)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4);
    let mut out = format!("{:width$}  {:>6}  {:>12}  result\n", "case", "seed", "max rel err");
    let mut all = true;
    for r in &results {
        all &= r.report.passed;
        let _ = writeln!(
            out,
            "{:width$}  {:>6}  {:>12.3e}  {}",
            r.name,
            r.seed,
            r.report.max_rel_error,
            if r.report.passed { "pass" } else { "FAIL" }
        );
    }
    print!("{out}");
    let failed = results.iter().filter(|r| !r.report.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn export_offsets(common: &Common, checkpoint: &Path, sample: usize) -> Outcome {
    let cfg = resolve(common, false)?;
    let model = load_model(checkpoint, &cfg)?;
    if !model.config().use_deform_bottleneck {
        return Err(Failure::Usage(format!(
            "{} has no deformable bottleneck",
            checkpoint.display()
        )));
    }
    let dir = out_dir(common)?;
    let mut m = manifest("export-offsets", &cfg);
    m.param_counts.insert("model".into(), model.param_count());
    let test = Dataset::generate(&cfg.data, cfg.splits.splits()?.test);
    if sample >= test.len() {
        return Err(Failure::Usage(format!(
            "--sample {sample} out of range for {} test samples",
            test.len()
        )));
    }
    for p in export_condition_offsets(&model, &test, sample, &dir)? {
        m.output(&dir, &p);
    }
    m.write(&dir)?;
    println!("offsets written to {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn info(common: &Common) -> Outcome {
    let cfg = resolve(common, false)?;
    println!("{}", cfg.to_json_pretty());
    let model = build_daunet(&cfg.model, cfg.seed)?;
    println!("\n{}", model.summary());
    for (name, (d, s)) in [
        ("unet", (false, false)),
        ("unet+simam", (false, true)),
        ("unet+bottleneck", (true, false)),
        ("daunet", (true, true)),
    ] {
        let v = build_daunet(&cfg.model.clone().with_flags(d, s), 0)?;
        println!("{name:16} {:>12} parameters", v.param_count());
    }
    Ok(ExitCode::SUCCESS)
}
