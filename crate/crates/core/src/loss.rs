//! Soft Dice + weighted binary cross-entropy on per-class sigmoid logits.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softplus, Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const POS_WEIGHT_RANGE: (f64, f64) = (1.0, 100.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on foreground pixels in the BCE term. `None` derives it from
    /// each batch as negatives / positives, clamped to `[1, 100]`.
    pub bce_pos_weight: Option<f64>,
    pub dice_smooth: f64,
    /// One weight per class; empty means all ones.
    pub class_weights: Vec<f64>,
    pub dice_weight: f64,
    pub bce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce_pos_weight: None,
            dice_smooth: 1.0,
            class_weights: Vec::new(),
            dice_weight: 1.0,
            bce_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(w) = self.bce_pos_weight {
            if !(w >= 1.0 && w.is_finite()) {
                return bad(format!("loss.bce_pos_weight must be >= 1, got {w}"));
            }
        }
        if !(self.dice_smooth > 0.0) {
            return bad(format!("loss.dice_smooth must be positive, got {}", self.dice_smooth));
        }
        if let Some(w) = self.class_weights.iter().find(|w| !(**w > 0.0)) {
            return bad(format!("loss.class_weights must be positive, got {w}"));
        }
        if !(self.dice_weight >= 0.0 && self.bce_weight >= 0.0) {
            return bad("loss term weights must be non-negative".into());
        }
        Ok(())
    }

    fn class_weights(&self, classes: usize) -> Result<Vec<f64>> {
        match self.class_weights.len() {
            0 => Ok(vec![1.0; classes]),
            n if n == classes => Ok(self.class_weights.clone()),
            n => Err(Error::shape(
                "loss",
                format!("{n} class weights for {classes} classes"),
            )),
        }
    }

    /// The foreground weight used for `target`.
    pub fn pos_weight_for(&self, target: &Tensor) -> f64 {
        self.bce_pos_weight.unwrap_or_else(|| {
            let pos = target.data().iter().filter(|&&g| g > 0.5).count() as f64;
            let neg = target.numel() as f64 - pos;
            let (lo, hi) = POS_WEIGHT_RANGE;
            if pos == 0.0 {
                hi
            } else {
                (neg / pos).clamp(lo, hi)
            }
        })
    }
}

fn check_target(op: &'static str, logits: &Tensor, target: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = logits.nchw()?;
    if target.dims() != logits.dims() {
        return Err(Error::shape(
            op,
            format!("target dims {:?} != logits dims {:?}", target.dims(), logits.dims()),
        ));
    }
    if target.data().iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::invalid(op, "target values must be 0 or 1"));
    }
    Ok((n, c, h * w))
}

struct DiceOp {
    logits: Var,
    target: Tensor,
    smooth: f64,
    class_weights: Vec<f64>,
}

impl DiceOp {
    /// Per-(n, c) plane: (intersection, prob sum, target sum).
    fn plane_sums(&self, z: &[f64], plane: usize) -> Vec<(f64, f64, f64)> {
        z.chunks(plane)
            .zip(self.target.data().chunks(plane))
            .map(|(zs, gs)| {
                zs.iter().zip(gs).fold((0.0, 0.0, 0.0), |(i, p, g), (&zv, &gv)| {
                    let pv = sigmoid(zv);
                    (i + pv * gv, p + pv, g + gv)
                })
            })
            .collect()
    }

    fn norm(&self, n: usize) -> f64 {
        n as f64 * self.class_weights.iter().sum::<f64>()
    }
}

impl Backward for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let z = ctx.value(self.logits);
        let (n, c, h, w) = z.nchw().expect("dice logits are NCHW");
        let plane = h * w;
        let sums = self.plane_sums(z.data(), plane);
        let scale = grad[0] / self.norm(n);
        let s = self.smooth;
        let mut dz = vec![0.0; z.numel()];
        for (k, &(i, p, g)) in sums.iter().enumerate() {
            let wc = self.class_weights[k % c];
            let den = p + g + s;
            let num = 2.0 * i + s;
            let range = k * plane..(k + 1) * plane;
            for ((d, &zv), &gv) in dz[range.clone()]
                .iter_mut()
                .zip(&z.data()[range.clone()])
                .zip(&self.target.data()[range])
            {
                let pv = sigmoid(zv);
                let dl_dp = -(2.0 * gv * den - num) / (den * den);
                *d = scale * wc * dl_dp * pv * (1.0 - pv);
            }
        }
        vec![(self.logits, dz)]
    }
}

struct BceOp {
    logits: Var,
    target: Tensor,
    pos_weight: f64,
    /// Per-element weight: class weight normalized so uniform weights give
    /// the plain mean.
    elem_scale: Vec<f64>,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "weighted_bce_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let z = ctx.value(self.logits).data();
        let g = self.target.data();
        let w = self.pos_weight;
        let dz = z
            .iter()
            .zip(g)
            .zip(&self.elem_scale)
            .map(|((&zv, &gv), &sc)| grad[0] * sc * (-w * gv * sigmoid(-zv) + (1.0 - gv) * sigmoid(zv)))
            .collect();
        vec![(self.logits, dz)]
    }
}

impl Graph {
    /// Soft Dice loss `1 - (2 Σpg + s) / (Σp + Σg + s)` per (sample, class)
    /// on `p = sigmoid(logits)`, averaged with class weights.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
        let z = self.value(logits);
        let (n, c, plane) = check_target("dice_loss", z, target)?;
        let op = DiceOp {
            logits,
            target: target.clone(),
            smooth: cfg.dice_smooth,
            class_weights: cfg.class_weights(c)?,
        };
        let s = cfg.dice_smooth;
        let total: f64 = op
            .plane_sums(z.data(), plane)
            .iter()
            .enumerate()
            .map(|(k, &(i, p, g))| op.class_weights[k % c] * (1.0 - (2.0 * i + s) / (p + g + s)))
            .sum();
        let value = Tensor::scalar(total / op.norm(n));
        Ok(self.push(value, op))
    }

    /// Mean of `-[w g log σ(z) + (1 - g) log(1 - σ(z))]`, evaluated as
    /// `w g softplus(-z) + (1 - g) softplus(z)`.
    pub fn weighted_bce_loss(&mut self, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
        let z = self.value(logits);
        let (n, c, plane) = check_target("weighted_bce_loss", z, target)?;
        let cw = cfg.class_weights(c)?;
        let mean_w = cw.iter().sum::<f64>() / c as f64;
        let count = (n * c * plane) as f64;
        let elem_scale: Vec<f64> = (0..n * c)
            .flat_map(|k| std::iter::repeat_n(cw[k % c] / mean_w / count, plane))
            .collect();
        let w = cfg.pos_weight_for(target);
        let total: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .zip(&elem_scale)
            .map(|((&zv, &gv), &sc)| sc * (w * gv * softplus(-zv) + (1.0 - gv) * softplus(zv)))
            .sum();
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            BceOp {
                logits,
                target: target.clone(),
                pos_weight: w,
                elem_scale,
            },
        ))
    }

    /// `dice_weight * dice + bce_weight * bce` (1:1 by default).
    pub fn hybrid_loss(&mut self, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
        let d = self.dice_loss(logits, target, cfg)?;
        let b = self.weighted_bce_loss(logits, target, cfg)?;
        let d = self.scale(d, cfg.dice_weight);
        let b = self.scale(b, cfg.bce_weight);
        self.add(d, b)
    }
}

fn eval(
    logits: &Tensor,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = f(&mut g, z)?;
    Ok(g.value(l).data()[0])
}

pub fn dice_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    eval(logits, |g, z| g.dice_loss(z, target, cfg))
}

pub fn weighted_bce_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    eval(logits, |g, z| g.weighted_bce_loss(z, target, cfg))
}

pub fn hybrid_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    eval(logits, |g, z| g.hybrid_loss(z, target, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(z: f64, g: f64) -> (Tensor, Tensor) {
        (Tensor::full(&[1, 1, 1, 1], z), Tensor::full(&[1, 1, 1, 1], g))
    }

    #[test]
    fn bce_hand_values() {
        let w1 = LossConfig {
            bce_pos_weight: Some(1.0),
            ..Default::default()
        };
        let w2 = LossConfig {
            bce_pos_weight: Some(2.0),
            ..Default::default()
        };
        let (z, g) = one(0.0, 1.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((weighted_bce_loss(&z, &g, &w1).unwrap() - ln2).abs() < 1e-15);
        assert!((weighted_bce_loss(&z, &g, &w2).unwrap() - 2.0 * ln2).abs() < 1e-15);
        let (z, g) = one(-500.0, 0.0);
        let l = weighted_bce_loss(&z, &g, &w1).unwrap();
        assert!(l.is_finite() && l < 1e-200);
    }

    #[test]
    fn pos_weight_heuristic_is_clamped() {
        let cfg = LossConfig::default();
        let mut t = Tensor::zeros(&[1, 1, 4, 4]);
        assert_eq!(cfg.pos_weight_for(&t), 100.0);
        t.data_mut()[..4].fill(1.0);
        assert_eq!(cfg.pos_weight_for(&t), 3.0);
        t.data_mut().fill(1.0);
        assert_eq!(cfg.pos_weight_for(&t), 1.0);
    }

    #[test]
    fn rejects_non_binary_targets_and_shape_mismatch() {
        let cfg = LossConfig::default();
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(dice_loss(&z, &Tensor::full(&[1, 1, 2, 2], 0.5), &cfg).is_err());
        assert!(dice_loss(&z, &Tensor::zeros(&[1, 2, 2, 2]), &cfg).is_err());
    }
}
