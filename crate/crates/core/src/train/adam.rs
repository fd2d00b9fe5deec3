use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &IndexMap<String, Tensor>, hyper: AdamHyper) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, p)| (n.clone(), Tensor::zeros(p.dims())))
                .collect()
        };
        AdamState {
            hyper,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter. `grads` must hold an
    /// entry of matching shape for each parameter.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor>,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for `{name}`")))?;
            let m = self
                .m
                .get(name)
                .ok_or_else(|| Error::invalid("adam_step", format!("no moment for `{name}`")))?;
            if g.dims() != p.dims() || m.dims() != p.dims() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "`{name}`: param {:?}, grad {:?}, moment {:?}",
                        p.dims(),
                        g.dims(),
                        m.dims()
                    ),
                ));
            }
        }
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m[name].data_mut();
            let v = self.v[name].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
