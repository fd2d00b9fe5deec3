//! Parameter-free SimAM attention.
//!
//! Each neuron `t` of a `(n, c)` plane with `M = H*W` neurons gets the energy
//!
//! ```text
//! mu_t = (sum_i x_i - x_t) / (M - 1)
//! E_t  = (x_t - mu_t)^2 + lambda * sum_{i != t} (x_i - mu_t)^2
//! ```
//!
//! and the weight `a_t = sigmoid(1 / (E_t + epsilon))`. The refined map is
//! `X ⊙ A`. Energies come from two plane reductions (sum and sum of
//! squares), so the whole map costs O(M) per plane.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimamConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for SimamConfig {
    fn default() -> Self {
        SimamConfig {
            lambda: 1e-4,
            epsilon: 1e-8,
        }
    }
}

impl SimamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "simam lambda and epsilon must be positive, got {} and {}",
                self.lambda, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-neuron quantities of one plane, computed on mean-shifted values (the
/// energy is translation invariant, and centring keeps the sum-of-squares
/// reduction well conditioned).
struct PlaneStats {
    m: f64,
    sum: f64,
    sum_sq: f64,
}

impl PlaneStats {
    fn new(z: &[f64]) -> Self {
        PlaneStats {
            m: z.len() as f64,
            sum: z.iter().sum(),
            sum_sq: z.iter().map(|v| v * v).sum(),
        }
    }

    #[inline]
    fn loo_mean(&self, zt: f64) -> f64 {
        (self.sum - zt) / (self.m - 1.0)
    }

    #[inline]
    fn energy(&self, zt: f64, lambda: f64) -> f64 {
        let mu = self.loo_mean(zt);
        let d2 = (zt - mu).powi(2);
        let all = self.sum_sq - 2.0 * mu * self.sum + self.m * mu * mu;
        d2 + lambda * (all - d2).max(0.0)
    }
}

fn centred(plane: &[f64]) -> Vec<f64> {
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    plane.iter().map(|v| v - mean).collect()
}

fn check_planes(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = x.nchw()?;
    if h * w < 2 {
        return Err(Error::shape(
            op,
            format!("plane has H*W = {} neuron; the leave-one-out mean needs at least 2", h * w),
        ));
    }
    Ok((n * c, h * w))
}

struct EnergyOp {
    input: Var,
    lambda: f64,
}

impl Backward for EnergyOp {
    fn name(&self) -> &'static str {
        "simam_energy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input);
        let (_, _, h, w) = x.nchw().expect("simam input is NCHW");
        let plane = h * w;
        let lam = self.lambda;
        let mut dx = vec![0.0; x.numel()];
        for (p, xs) in x.data().chunks(plane).enumerate() {
            let z = centred(xs);
            let st = PlaneStats::new(&z);
            let gs = &grad[p * plane..(p + 1) * plane];
            let m1 = st.m - 1.0;
            let (mut cd, mut csum, mut cmu, mut cr) = (0.0, 0.0, 0.0, 0.0);
            for (&zt, &ct) in z.iter().zip(gs) {
                let mu = st.loo_mean(zt);
                cd += ct * (zt - mu);
                csum += ct;
                cmu += ct * mu;
                cr += ct * (st.m * mu - st.sum);
            }
            let out = &mut dx[p * plane..(p + 1) * plane];
            for ((o, &zj), &cj) in out.iter_mut().zip(&z).zip(gs) {
                let mu = st.loo_mean(zj);
                let dj = zj - mu;
                *o = 2.0 * (1.0 - lam) * (cj * dj * st.m / m1 - cd / m1)
                    + 2.0 * lam * (zj * csum - cmu)
                    + 2.0 * lam / m1 * (cr - cj * (st.m * mu - st.sum));
            }
        }
        vec![(self.input, dx)]
    }
}

impl Graph {
    /// Per-neuron SimAM energy map, same shape as the input.
    pub fn simam_energy(&mut self, input: Var, lambda: f64) -> Result<Var> {
        let x = self.value(input);
        let (planes, len) = check_planes("simam_energy", x)?;
        let mut out = Vec::with_capacity(x.numel());
        for p in 0..planes {
            let z = centred(&x.data()[p * len..(p + 1) * len]);
            let st = PlaneStats::new(&z);
            out.extend(z.iter().map(|&zt| st.energy(zt, lambda)));
        }
        let value = Tensor::from_parts(x.dims().to_vec(), out);
        Ok(self.push(value, EnergyOp { input, lambda }))
    }
}

/// `X ⊙ sigmoid(1 / (E + epsilon))`, recorded on the graph. Adds no
/// parameters and behaves identically in training and evaluation.
pub fn simam_attend(g: &mut Graph, x: Var, cfg: &SimamConfig) -> Result<Var> {
    let a = simam_weights(g, x, cfg)?;
    g.mul(x, a)
}

/// The attention map `A` on the graph.
pub fn simam_weights(g: &mut Graph, x: Var, cfg: &SimamConfig) -> Result<Var> {
    let e = g.simam_energy(x, cfg.lambda)?;
    let shifted = g.add_scalar(e, cfg.epsilon);
    let inv = g.reciprocal(shifted);
    Ok(g.sigmoid(inv))
}

pub fn energy(x: &Tensor, cfg: &SimamConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let e = g.simam_energy(v, cfg.lambda)?;
    Ok(g.value(e).clone())
}

pub fn attention_weights(x: &Tensor, cfg: &SimamConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let a = simam_weights(&mut g, v, cfg)?;
    Ok(g.value(a).clone())
}

pub fn attend(x: &Tensor, cfg: &SimamConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = simam_attend(&mut g, v, cfg)?;
    Ok(g.value(y).clone())
}

/// Dumps the attention map of `x` in the tensor CSV layout.
pub fn write_attention_csv(x: &Tensor, cfg: &SimamConfig, path: &Path) -> Result<()> {
    attention_weights(x, cfg)?.write_csv(path)
}
