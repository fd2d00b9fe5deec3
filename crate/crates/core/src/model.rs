//! UNet and DAUNet assembled from the graph primitives.
//!
//! Encoder stage `i` (1-based) has `base * 2^(i-1)` channels and runs two
//! `conv3x3 -> batchnorm -> relu` units followed by a 2x2 max pool. The
//! bottleneck works at `base * 2^depth` channels. Decoder stage `i` upsamples
//! with a 2x2 stride-2 transposed convolution, concatenates `[skip, up]` and
//! runs two conv units; a 1x1 head produces one logit map per foreground
//! class.
//!
//! DAUNet swaps the bottleneck's two 3x3 units for
//! `1x1 (C/4) -> deformable 3x3 (C/4) -> 1x1 (C)`, each followed by
//! batchnorm and relu, and with `use_simam` applies SimAM to the bottleneck
//! output, to every skip tensor before concatenation and to every decoder
//! stage output.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, NormMode, Var};
use crate::deform::{deform_conv2d, DeformConvVars, DEFORM_KERNEL};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::simam::{simam_attend, SimamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Foreground classes; background is implicit.
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub use_deform_bottleneck: bool,
    pub use_simam: bool,
    pub image_size: usize,
    pub simam: SimamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 256x256 grayscale, base 64, four stages, full DAUNet.
    pub fn full() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 1,
            base_channels: 64,
            depth: 4,
            use_deform_bottleneck: true,
            use_simam: true,
            image_size: 256,
            simam: SimamConfig::default(),
        }
    }

    /// 64x64, base 16, four stages, two foreground classes, full DAUNet.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: 16,
            image_size: 64,
            num_classes: 2,
            ..ModelConfig::full()
        }
    }

    pub fn with_flags(mut self, deform_bottleneck: bool, simam: bool) -> Self {
        self.use_deform_bottleneck = deform_bottleneck;
        self.use_simam = simam;
        self
    }

    pub fn is_unet(&self) -> bool {
        !self.use_deform_bottleneck && !self.use_simam
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("model.in_channels and model.num_classes must be positive".into());
        }
        if self.base_channels == 0 || self.depth == 0 {
            return bad("model.base_channels and model.depth must be at least 1".into());
        }
        let step = 1usize
            .checked_shl(self.depth as u32)
            .filter(|s| *s <= self.image_size)
            .ok_or_else(|| Error::Config(format!("model.depth {} too large", self.depth)))?;
        if !self.image_size.is_multiple_of(step) {
            return bad(format!(
                "model.image_size {} is not divisible by 2^depth = {step}",
                self.image_size
            ));
        }
        if self.use_deform_bottleneck && self.bottleneck_channels() < 4 {
            return bad("the deformable bottleneck needs at least 4 channels".into());
        }
        if self.use_simam {
            self.simam.validate()?;
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }
}

/// Whether a forward pass normalizes with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles produced by [`Model::forward`].
pub struct ForwardOutput {
    pub logits: Var,
    /// Parameter leaves in model order.
    pub params: Vec<(String, Var)>,
    /// Batch statistics per norm layer (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Bottleneck offsets and modulation when the deformable layer is used.
    pub offsets: Option<Var>,
    pub modulation: Option<Var>,
}

/// One row of the architecture summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub channels: usize,
    pub size: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

struct Builder {
    seed: u64,
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

/// FNV-1a, used to key per-parameter init streams by name so that layers
/// shared between variants start from identical values.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Builder {
    fn tensor(&mut self, name: String, dims: &[usize], init: Init) {
        let t = match init {
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut rng = substream(self.seed, Stream::Init, name_key(&name));
                Tensor::uniform(dims, -bound, bound, &mut rng)
            }
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::ones(dims),
        };
        let prev = self.params.insert(name, t);
        debug_assert!(prev.is_none(), "duplicate parameter name");
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.tensor(format!("{name}.weight"), &[cout, cin, k, k], Init::FanIn(cin * k * k));
        if bias {
            self.tensor(format!("{name}.bias"), &[cout], Init::Zeros);
        }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) {
        self.tensor(format!("{name}.weight"), &[cin, cout, 2, 2], Init::FanIn(cin * 4));
        self.tensor(format!("{name}.bias"), &[cout], Init::Zeros);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.tensor(format!("{name}.weight"), &[c], Init::Ones);
        self.tensor(format!("{name}.bias"), &[c], Init::Zeros);
        self.buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{name}.running_var"), Tensor::ones(&[c]));
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3, false);
        self.bn(&format!("{prefix}.bn1"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3, false);
        self.bn(&format!("{prefix}.bn2"), cout);
    }

    fn deform_bottleneck(&mut self, cin: usize, cout: usize) {
        let q = cout / 4;
        let k2 = DEFORM_KERNEL * DEFORM_KERNEL;
        self.conv("bottleneck.compress", cin, q, 1, false);
        self.bn("bottleneck.compress_bn", q);
        self.conv("bottleneck.deform", q, q, DEFORM_KERNEL, true);
        self.tensor(
            "bottleneck.deform.offset.weight".into(),
            &[3 * k2, q, DEFORM_KERNEL, DEFORM_KERNEL],
            Init::Zeros,
        );
        self.tensor("bottleneck.deform.offset.bias".into(), &[3 * k2], Init::Zeros);
        self.bn("bottleneck.deform_bn", q);
        self.conv("bottleneck.expand", q, cout, 1, false);
        self.bn("bottleneck.expand_bn", cout);
    }
}

/// The classical UNet; both ablation flags must be off.
pub fn build_unet(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    if !cfg.is_unet() {
        return Err(Error::Config(
            "build_unet needs use_deform_bottleneck = false and use_simam = false".into(),
        ));
    }
    Model::build(cfg.clone(), seed)
}

/// UNet with whichever DAUNet components the flags enable.
pub fn build_daunet(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(cfg.clone(), seed)
}

struct Ctx<'m> {
    model: &'m Model,
    mode: Mode,
    trainable: bool,
    vars: Vec<(String, Var)>,
    stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    fn param(&mut self, g: &mut Graph, name: &str) -> Var {
        let t = self.model.params[name].clone();
        let v = g.leaf(t, self.trainable);
        self.vars.push((name.to_string(), v));
        v
    }

    fn conv(&mut self, g: &mut Graph, x: Var, name: &str, pad: usize, bias: bool) -> Result<Var> {
        let w = self.param(g, &format!("{name}.weight"));
        let b = bias.then(|| self.param(g, &format!("{name}.bias")));
        g.conv2d(x, w, b, 1, pad)
    }

    fn bn_relu(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{name}.weight"));
        let beta = self.param(g, &format!("{name}.bias"));
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm2d(x, gamma, beta, NormMode::Train)?;
                self.stats
                    .push((name.to_string(), stats.expect("train mode yields stats")));
                y
            }
            Mode::Eval => {
                let rm = &self.model.buffers[&format!("{name}.running_mean")];
                let rv = &self.model.buffers[&format!("{name}.running_var")];
                let mode = NormMode::Eval {
                    running_mean: rm.data(),
                    running_var: rv.data(),
                };
                g.batch_norm2d(x, gamma, beta, mode)?.0
            }
        };
        Ok(g.relu(y))
    }

    fn double_conv(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let y = self.conv(g, x, &format!("{prefix}.conv1"), 1, false)?;
        let y = self.bn_relu(g, y, &format!("{prefix}.bn1"))?;
        let y = self.conv(g, y, &format!("{prefix}.conv2"), 1, false)?;
        self.bn_relu(g, y, &format!("{prefix}.bn2"))
    }
}

impl Model {
    fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = Builder {
            seed,
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        };
        let mut cin = config.in_channels;
        for i in 1..=config.depth {
            let c = config.stage_channels(i);
            b.double_conv(&format!("enc{i}"), cin, c);
            cin = c;
        }
        let cb = config.bottleneck_channels();
        if config.use_deform_bottleneck {
            b.deform_bottleneck(cin, cb);
        } else {
            b.double_conv("bottleneck", cin, cb);
        }
        let mut below = cb;
        for i in (1..=config.depth).rev() {
            let c = config.stage_channels(i);
            b.conv_t(&format!("dec{i}.up"), below, c);
            b.double_conv(&format!("dec{i}"), 2 * c, c);
            below = c;
        }
        b.conv("head", config.base_channels, config.num_classes, 1, true);
        let model = Model {
            config,
            params: b.params,
            buffers: b.buffers,
        };
        debug_assert!(model
            .params
            .iter()
            .filter(|(n, _)| n.contains(".offset."))
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    /// Batch-norm running statistics (not trainable).
    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.buffers
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.nchw()?;
        let cfg = &self.config;
        if c != cfg.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input channels {c} != model.in_channels {}", cfg.in_channels),
            ));
        }
        if h != cfg.image_size || w != cfg.image_size {
            return Err(Error::shape(
                "forward",
                format!("input spatial dims {h}x{w} != model.image_size {}", cfg.image_size),
            ));
        }
        Ok(())
    }

    /// Records a forward pass. Parameters become gradient-tracking leaves
    /// when `trainable` is set.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, trainable: bool) -> Result<ForwardOutput> {
        self.check_input(g.value(x))?;
        let cfg = &self.config;
        let mut ctx = Ctx {
            model: self,
            mode,
            trainable,
            vars: Vec::with_capacity(self.params.len()),
            stats: Vec::new(),
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for i in 1..=cfg.depth {
            let y = ctx.double_conv(g, h, &format!("enc{i}"))?;
            skips.push(y);
            h = g.max_pool2d(y)?;
        }

        let (mut offsets, mut modulation) = (None, None);
        h = if cfg.use_deform_bottleneck {
            let y = ctx.conv(g, h, "bottleneck.compress", 0, false)?;
            let y = ctx.bn_relu(g, y, "bottleneck.compress_bn")?;
            let vars = DeformConvVars {
                main_weight: ctx.param(g, "bottleneck.deform.weight"),
                main_bias: Some(ctx.param(g, "bottleneck.deform.bias")),
                branch_weight: ctx.param(g, "bottleneck.deform.offset.weight"),
                branch_bias: ctx.param(g, "bottleneck.deform.offset.bias"),
            };
            let d = deform_conv2d(g, y, &vars)?;
            offsets = Some(d.offsets);
            modulation = Some(d.modulation);
            let y = ctx.bn_relu(g, d.output, "bottleneck.deform_bn")?;
            let y = ctx.conv(g, y, "bottleneck.expand", 0, false)?;
            let y = ctx.bn_relu(g, y, "bottleneck.expand_bn")?;
            if cfg.use_simam {
                simam_attend(g, y, &cfg.simam)?
            } else {
                y
            }
        } else {
            ctx.double_conv(g, h, "bottleneck")?
        };

        for i in (1..=cfg.depth).rev() {
            let w = ctx.param(g, &format!("dec{i}.up.weight"));
            let b = ctx.param(g, &format!("dec{i}.up.bias"));
            let up = g.conv_transpose2d(h, w, Some(b), 2, 0)?;
            let mut skip = skips[i - 1];
            if cfg.use_simam {
                skip = simam_attend(g, skip, &cfg.simam)?;
            }
            let cat = g.concat_channels(skip, up)?;
            h = ctx.double_conv(g, cat, &format!("dec{i}"))?;
            if cfg.use_simam {
                h = simam_attend(g, h, &cfg.simam)?;
            }
        }
        let logits = ctx.conv(g, h, "head", 0, true)?;
        Ok(ForwardOutput {
            logits,
            params: ctx.vars,
            bn_stats: ctx.stats,
            offsets,
            modulation,
        })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (name, s) in stats {
            let mut rm = self.buffers[&format!("{name}.running_mean")].clone();
            let mut rv = self.buffers[&format!("{name}.running_var")].clone();
            s.update_running(rm.data_mut(), rv.data_mut());
            self.buffers[&format!("{name}.running_mean")] = rm;
            self.buffers[&format!("{name}.running_var")] = rv;
        }
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, Mode::Eval, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode logits plus bottleneck offsets (when present).
    pub fn predict_with_offsets(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, Mode::Eval, false)?;
        Ok((
            g.value(out.logits).clone(),
            out.offsets.map(|o| g.value(o).clone()),
        ))
    }

    /// Blocks in execution order with their output shape (for one sample)
    /// and parameter counts.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        let cfg = &self.config;
        let count = |prefix: &str| -> usize {
            self.params
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("{prefix}.")))
                .map(|(_, t)| t.numel())
                .sum()
        };
        let mut out = Vec::new();
        for i in 1..=cfg.depth {
            let name = format!("enc{i}");
            out.push(BlockInfo {
                params: count(&name),
                name,
                channels: cfg.stage_channels(i),
                size: cfg.image_size >> (i - 1),
            });
        }
        out.push(BlockInfo {
            name: "bottleneck".into(),
            channels: cfg.bottleneck_channels(),
            size: cfg.image_size >> cfg.depth,
            params: count("bottleneck"),
        });
        for i in (1..=cfg.depth).rev() {
            let name = format!("dec{i}");
            out.push(BlockInfo {
                params: count(&name),
                name,
                channels: cfg.stage_channels(i),
                size: cfg.image_size >> (i - 1),
            });
        }
        out.push(BlockInfo {
            name: "head".into(),
            channels: cfg.num_classes,
            size: cfg.image_size,
            params: count("head"),
        });
        out
    }

    /// Text table of [`Model::blocks`] with a total line.
    pub fn summary(&self) -> String {
        let mut s = format!("{:<12} {:>18} {:>12}\n", "block", "output", "params");
        for b in self.blocks() {
            let shape = format!("{}x{}x{}", b.channels, b.size, b.size);
            let _ = writeln!(s, "{:<12} {:>18} {:>12}", b.name, shape, b.params);
        }
        let _ = writeln!(s, "{:<12} {:>18} {:>12}", "total", "", self.param_count());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            num_classes: 1,
            base_channels: 8,
            depth: 2,
            use_deform_bottleneck: false,
            use_simam: false,
            image_size: 16,
            simam: SimamConfig::default(),
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = tiny();
        c.image_size = 18;
        assert!(c.validate().is_err());
        c = tiny();
        c.depth = 0;
        assert!(c.validate().is_err());
        assert!(build_unet(&tiny().with_flags(true, false), 0).is_err());
    }

    #[test]
    fn tiny_unet_shape_contract() {
        let m = build_unet(&tiny(), 0).unwrap();
        let y = m.predict(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert_eq!(y.dims(), &[1, 1, 16, 16]);
        assert!(y.all_finite());
    }

    #[test]
    fn summary_total_matches_param_count() {
        let m = build_daunet(&tiny().with_flags(true, true), 3).unwrap();
        let sum: usize = m.blocks().iter().map(|b| b.params).sum();
        assert_eq!(sum, m.param_count());
        assert!(m.summary().contains(&m.param_count().to_string()));
    }
}
