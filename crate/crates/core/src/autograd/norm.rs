use super::graph::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a batch-norm layer obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Per-channel statistics of the current batch over `N x H x W`.
    Train,
    /// Frozen running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<f64>,
    /// Number of values each channel was reduced over.
    pub count: usize,
}

impl BatchStats {
    /// Momentum update of running statistics; the running variance tracks
    /// the unbiased estimate.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let m = self.count as f64;
        let unbias = if self.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] =
                (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var[c] * unbias;
        }
    }
}

struct BatchNormOp {
    input: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.gamma, self.beta]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input);
        let gamma = ctx.value(self.gamma).data();
        let (n, c, h, w) = x.nchw().expect("batchnorm input is NCHW");
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = x.data();

        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for p in off..off + plane {
                    let xhat = (xd[p] - self.mean[ci]) * self.inv_std[ci];
                    sum_g[ci] += grad[p];
                    sum_gx[ci] += grad[p] * xhat;
                }
            }
        }

        let mut out = Vec::new();
        if ctx.needs(self.input) {
            let mut dx = vec![0.0; x.numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    let k = gamma[ci] * self.inv_std[ci];
                    for p in off..off + plane {
                        dx[p] = if self.batch_stats {
                            let xhat = (xd[p] - self.mean[ci]) * self.inv_std[ci];
                            k * (grad[p] - sum_g[ci] / m - xhat * sum_gx[ci] / m)
                        } else {
                            k * grad[p]
                        };
                    }
                }
            }
            out.push((self.input, dx));
        }
        if ctx.needs(self.gamma) {
            out.push((self.gamma, sum_gx));
        }
        if ctx.needs(self.beta) {
            out.push((self.beta, sum_g));
        }
        out
    }
}

impl Graph {
    /// Per-channel batch normalization with epsilon [`BN_EPS`]. In
    /// [`NormMode::Train`] the returned [`BatchStats`] should be folded into
    /// the caller's running statistics.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batchnorm2d";
        let x = self.value(input);
        let (n, c, h, w) = x.nchw()?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::shape(
                OP,
                format!(
                    "gamma/beta lengths {}/{} != channels {c}",
                    tg.numel(),
                    tb.numel()
                ),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let xd = x.data();

        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        mean[ci] += xd[off..off + plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        var[ci] += xd[off..off + plane]
                            .iter()
                            .map(|v| (v - mean[ci]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(
                        OP,
                        format!("running stats length {} != channels {c}", running_mean.len()),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut out = vec![0.0; x.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                let (gm, bt) = (tg.data()[ci], tb.data()[ci]);
                for p in off..off + plane {
                    out[p] = gm * (xd[p] - mean[ci]) * inv_std[ci] + bt;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let var_out = self.push(
            value,
            BatchNormOp {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: stats.is_some(),
            },
        );
        Ok((var_out, stats))
    }
}
