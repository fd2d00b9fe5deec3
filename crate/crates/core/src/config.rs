//! Run configuration: JSON files, dotted `key=value` overrides and the key
//! table that drives both validation and help text.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PhantomConfig, Splits};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::Hd95Mode;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train: u64,
    pub n_val: u64,
    pub n_test: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_train: 200,
            n_val: 50,
            n_test: 50,
        }
    }
}

impl SplitConfig {
    pub fn splits(&self) -> Result<Splits> {
        crate::data::make_splits(self.n_train, self.n_val, self.n_test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives initialisation, shuffling and augmentation. The phantom set is
    /// keyed by `data.seed` so that it stays fixed across training seeds.
    pub seed: u64,
    pub augment: bool,
    pub hd95_mode: Hd95Mode,
    pub splits: SplitConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub data: PhantomConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// 64x64 two-class phantoms, base 16, 30 epochs of batch 8.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            augment: true,
            hd95_mode: Hd95Mode::default(),
            splits: SplitConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::desk(),
            data: PhantomConfig::default(),
        }
    }

    /// 256x256 single-class phantoms, base 64, 150 epochs of batch 12.
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 12,
            epochs: 150,
            model: ModelConfig::full(),
            data: PhantomConfig {
                image_size: 256,
                num_fg_classes: 1,
                ..PhantomConfig::default()
            },
            ..TrainConfig::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "full" => Ok(TrainConfig::full()),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected desk or full)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.splits.n_train == 0 || self.splits.n_val == 0 {
            return Err(Error::Config(
                "splits.n_train and splits.n_val must be at least 1".into(),
            ));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if self.model.num_classes != self.data.num_fg_classes {
            return Err(Error::Config(format!(
                "model.num_classes ({}) must equal data.num_fg_classes ({})",
                self.model.num_classes, self.data.num_fg_classes
            )));
        }
        if self.model.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model.image_size ({}) must equal data.image_size ({})",
                self.model.image_size, self.data.image_size
            )));
        }
        if self.model.in_channels != 1 {
            return Err(Error::Config(
                "model.in_channels must be 1 for grayscale phantoms".into(),
            ));
        }
        Ok(())
    }

    /// Parses JSON on top of `base`; absent keys keep their base values.
    pub fn from_json_with_base(text: &str, base: &TrainConfig) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let mut merged = serde_json::to_value(base).expect("config serializes");
        check_keys(&user, "")?;
        merge(&mut merged, user);
        from_value(merged)
    }

    pub fn load(path: &Path, base: &TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_base(&text, base)
    }

    /// Applies `key=value` overrides in order, then validates the result.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        from_value(v)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn from_value(v: Value) -> Result<TrainConfig> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyKind {
    Bool,
    Int,
    Float,
    /// Number or `null`.
    OptFloat,
    /// Comma-separated numbers or a JSON array.
    FloatList,
    Choice(&'static [&'static str]),
}

impl KeyKind {
    fn label(self) -> String {
        match self {
            KeyKind::Bool => "bool".into(),
            KeyKind::Int => "int".into(),
            KeyKind::Float => "float".into(),
            KeyKind::OptFloat => "float|null".into(),
            KeyKind::FloatList => "float list".into(),
            KeyKind::Choice(c) => c.join("|"),
        }
    }

    fn parse(self, key: &str, raw: &str) -> Result<Value> {
        let bad = || Error::Config(format!("`{key}` expects {}, got `{raw}`", self.label()));
        let float = |s: &str| -> Result<Value> {
            let f: f64 = s.trim().parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)
        };
        match self {
            KeyKind::Bool => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
            KeyKind::Int => raw.parse::<u64>().map(Value::from).map_err(|_| bad()),
            KeyKind::Float => float(raw),
            KeyKind::OptFloat if raw == "null" || raw == "none" => Ok(Value::Null),
            KeyKind::OptFloat => float(raw),
            KeyKind::FloatList => {
                if raw.trim_start().starts_with('[') {
                    let v: Value = serde_json::from_str(raw).map_err(|_| bad())?;
                    return Ok(v);
                }
                if raw.trim().is_empty() {
                    return Ok(Value::Array(Vec::new()));
                }
                raw.split(',').map(float).collect::<Result<Vec<_>>>().map(Value::Array)
            }
            KeyKind::Choice(choices) if choices.contains(&raw) => Ok(Value::String(raw.into())),
            KeyKind::Choice(_) => Err(bad()),
        }
    }
}

pub struct ConfigKey {
    pub key: &'static str,
    pub kind: KeyKind,
    pub help: &'static str,
}

const fn key(key: &'static str, kind: KeyKind, help: &'static str) -> ConfigKey {
    ConfigKey { key, kind, help }
}

/// Every accepted configuration key.
pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("lr", KeyKind::Float, "Adam learning rate"),
    key("batch_size", KeyKind::Int, "training batch size"),
    key("epochs", KeyKind::Int, "training epochs"),
    key("seed", KeyKind::Int, "init/shuffle/augment seed (DAUNET_SEED overrides)"),
    key("augment", KeyKind::Bool, "random zoom, rotation and flip on training batches"),
    key(
        "hd95_mode",
        KeyKind::Choice(&["directed_max", "pooled"]),
        "how the two boundary directions combine into HD95",
    ),
    key("splits.n_train", KeyKind::Int, "training phantoms"),
    key("splits.n_val", KeyKind::Int, "validation phantoms"),
    key("splits.n_test", KeyKind::Int, "test phantoms"),
    key("loss.bce_pos_weight", KeyKind::OptFloat, "fixed BCE foreground weight; null = per-batch ratio"),
    key("loss.dice_smooth", KeyKind::Float, "Dice smoothing constant"),
    key("loss.class_weights", KeyKind::FloatList, "per-class loss weights; empty = ones"),
    key("loss.dice_weight", KeyKind::Float, "weight of the Dice term"),
    key("loss.bce_weight", KeyKind::Float, "weight of the BCE term"),
    key("model.in_channels", KeyKind::Int, "input channels"),
    key("model.num_classes", KeyKind::Int, "foreground classes"),
    key("model.base_channels", KeyKind::Int, "channels of the first encoder stage"),
    key("model.depth", KeyKind::Int, "encoder stages"),
    key("model.use_deform_bottleneck", KeyKind::Bool, "compressed deformable bottleneck"),
    key("model.use_simam", KeyKind::Bool, "SimAM on skips, decoder and bottleneck"),
    key("model.image_size", KeyKind::Int, "input height and width"),
    key("model.simam.lambda", KeyKind::Float, "SimAM energy regulariser"),
    key("model.simam.epsilon", KeyKind::Float, "SimAM variance floor"),
    key("data.image_size", KeyKind::Int, "phantom height and width"),
    key("data.num_fg_classes", KeyKind::Int, "foreground classes (1 or 2)"),
    key("data.noise_std", KeyKind::Float, "additive Gaussian noise"),
    key("data.speckle", KeyKind::Bool, "multiplicative speckle"),
    key("data.seed", KeyKind::Int, "phantom set seed"),
];

pub fn lookup_key(key: &str) -> Option<&'static ConfigKey> {
    CONFIG_KEYS.iter().find(|k| k.key == key)
}

/// Help text listing every key with its type, default and description.
pub fn keys_help() -> String {
    let defaults = serde_json::to_value(TrainConfig::desk()).expect("config serializes");
    let width = CONFIG_KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (desk defaults):\n");
    for k in CONFIG_KEYS {
        let d = get_path(&defaults, k.key).map(Value::to_string).unwrap_or_default();
        let _ = writeln!(
            out,
            "  {:width$}  {:<20} {} [default {d}]",
            k.key,
            k.kind.label(),
            k.help
        );
    }
    out
}

fn get_path<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, part| cur.get(part))
}

/// Sets one dotted key in a serialized config.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (k, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let entry = lookup_key(k.trim())
        .ok_or_else(|| Error::Config(format!("unknown config key `{}`", k.trim())))?;
    let value = entry.kind.parse(entry.key, raw.trim())?;
    let mut cur = config;
    let parts: Vec<&str> = entry.key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("missing section `{part}`")))?;
    }
    cur[parts[parts.len() - 1]] = value;
    Ok(())
}

fn check_keys(v: &Value, prefix: &str) -> Result<()> {
    let Value::Object(map) = v else {
        return Err(Error::Config(format!(
            "`{}` must be an object",
            if prefix.is_empty() { "<root>" } else { prefix }
        )));
    };
    for (k, child) in map {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if lookup_key(&full).is_some() {
            continue;
        }
        let is_section = CONFIG_KEYS.iter().any(|c| c.key.starts_with(&format!("{full}.")));
        if !is_section {
            return Err(Error::Config(format!("unknown config key `{full}`")));
        }
        check_keys(child, &full)?;
    }
    Ok(())
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}
