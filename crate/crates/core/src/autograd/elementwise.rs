//! Pointwise maps, binary products, reductions and channel plumbing.

use super::graph::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Reciprocal,
    AddScalar,
    Scale(f64),
}

struct UnaryOp {
    input: Var,
    kind: Unary,
}

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Reciprocal => "reciprocal",
            Unary::AddScalar => "add_scalar",
            Unary::Scale(_) => "scale",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input).data();
        let y = ctx.output().data();
        let dx: Vec<f64> = match self.kind {
            // right-continuous at zero, matching `x > 0`
            Unary::Relu => grad
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
            Unary::Sigmoid => grad
                .iter()
                .zip(y)
                .map(|(g, &s)| g * s * (1.0 - s))
                .collect(),
            Unary::Reciprocal => grad.iter().zip(y).map(|(g, &r)| -g * r * r).collect(),
            Unary::AddScalar => grad.to_vec(),
            Unary::Scale(f) => grad.iter().map(|g| g * f).collect(),
        };
        vec![(self.input, dx)]
    }
}

/// Product of two tensors. `b` either matches `a` exactly or is rank 4 with
/// a single channel, in which case it is broadcast across `a`'s channels.
struct MulOp {
    a: Var,
    b: Var,
    broadcast: Option<(usize, usize, usize)>,
}

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let a = ctx.value(self.a).data();
        let b = ctx.value(self.b).data();
        let mut out = Vec::new();
        match self.broadcast {
            None => {
                if ctx.needs(self.a) {
                    out.push((self.a, grad.iter().zip(b).map(|(g, v)| g * v).collect()));
                }
                if ctx.needs(self.b) {
                    out.push((self.b, grad.iter().zip(a).map(|(g, v)| g * v).collect()));
                }
            }
            Some((n, c, plane)) => {
                if ctx.needs(self.a) {
                    let mut da = vec![0.0; a.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for p in 0..plane {
                                da[off + p] = grad[off + p] * b[ni * plane + p];
                            }
                        }
                    }
                    out.push((self.a, da));
                }
                if ctx.needs(self.b) {
                    let mut db = vec![0.0; b.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for p in 0..plane {
                                db[ni * plane + p] += grad[off + p] * a[off + p];
                            }
                        }
                    }
                    out.push((self.b, db));
                }
            }
        }
        out
    }
}

struct AddOp {
    a: Var,
    b: Var,
}

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        [self.a, self.b]
            .into_iter()
            .filter(|&v| ctx.needs(v))
            .map(|v| (v, grad.to_vec()))
            .collect()
    }
}

struct SumOp {
    input: Var,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        vec![(self.input, vec![grad[0]; ctx.value(self.input).numel()])]
    }
}

struct ConcatOp {
    a: Var,
    b: Var,
    /// (N, C_a, C_b, H*W)
    layout: (usize, usize, usize, usize),
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (n, ca, cb, plane) = self.layout;
        let (la, lb) = (ca * plane, cb * plane);
        let mut da = Vec::with_capacity(n * la);
        let mut db = Vec::with_capacity(n * lb);
        for chunk in grad.chunks(la + lb) {
            da.extend_from_slice(&chunk[..la]);
            db.extend_from_slice(&chunk[la..]);
        }
        let mut out = Vec::new();
        if ctx.needs(self.a) {
            out.push((self.a, da));
        }
        if ctx.needs(self.b) {
            out.push((self.b, db));
        }
        out
    }
}

struct NarrowOp {
    input: Var,
    start: usize,
    len: usize,
}

impl Backward for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input);
        let (n, c, h, w) = x.nchw().expect("narrow input is NCHW");
        let plane = h * w;
        let mut dx = vec![0.0; x.numel()];
        for ni in 0..n {
            let src = &grad[ni * self.len * plane..(ni + 1) * self.len * plane];
            let off = (ni * c + self.start) * plane;
            dx[off..off + self.len * plane].copy_from_slice(src);
        }
        vec![(self.input, dx)]
    }
}

struct SliceOp {
    input: Var,
    start: usize,
}

impl Backward for SliceOp {
    fn name(&self) -> &'static str {
        "narrow_flat"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut dx = vec![0.0; ctx.value(self.input).numel()];
        dx[self.start..self.start + grad.len()].copy_from_slice(grad);
        vec![(self.input, dx)]
    }
}

impl Graph {
    fn unary(&mut self, input: Var, kind: Unary, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(input).map(f);
        self.push(value, UnaryOp { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Relu, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Sigmoid, sigmoid)
    }

    pub fn reciprocal(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Reciprocal, |v| 1.0 / v)
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Var {
        self.unary(input, Unary::AddScalar, |v| v + c)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, Unary::Scale(factor), |v| v * factor)
    }

    /// Elementwise product `a ⊙ b`. `b` may also be `(N, 1, H, W)` against
    /// `a: (N, C, H, W)`, broadcasting over channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() == tb.dims() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            let value = Tensor::from_parts(ta.dims().to_vec(), data);
            return Ok(self.push(
                value,
                MulOp {
                    a,
                    b,
                    broadcast: None,
                },
            ));
        }
        match (ta.nchw(), tb.nchw()) {
            (Ok((n, c, h, w)), Ok((nb, 1, hb, wb))) if (n, h, w) == (nb, hb, wb) => {
                let plane = h * w;
                let mut data = ta.data().to_vec();
                for ni in 0..n {
                    let bp = &tb.data()[ni * plane..(ni + 1) * plane];
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for (v, s) in data[off..off + plane].iter_mut().zip(bp) {
                            *v *= s;
                        }
                    }
                }
                let value = Tensor::from_parts(ta.dims().to_vec(), data);
                Ok(self.push(
                    value,
                    MulOp {
                        a,
                        b,
                        broadcast: Some((n, c, plane)),
                    },
                ))
            }
            _ => Err(Error::shape(
                "mul",
                format!(
                    "cannot multiply dims {:?} by {:?} (need equal shapes or a 1-channel right operand)",
                    ta.dims(),
                    tb.dims()
                ),
            )),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape(
                "add",
                format!("dims {:?} != {:?}", ta.dims(), tb.dims()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.dims().to_vec(), data);
        Ok(self.push(value, AddOp { a, b }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, SumOp { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel() as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// `sum(a ⊙ weights)` for a constant weight tensor: a random linear
    /// functional used to probe gradients.
    pub fn dot_const(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul(a, w)?;
        Ok(self.sum(p))
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.nchw()?;
        let (nb, cb, hb, wb) = tb.nchw()?;
        for (what, x, y) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
            if x != y {
                return Err(Error::shape(OP, format!("{what} {x} != {y}")));
            }
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for ni in 0..n {
            data.extend_from_slice(&ta.data()[ni * ca * plane..(ni + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], data);
        Ok(self.push(
            value,
            ConcatOp {
                a,
                b,
                layout: (n, ca, cb, plane),
            },
        ))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.nchw()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "narrow_channels",
                format!("channel range {start}..{} outside 0..{c}", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let off = (ni * c + start) * plane;
            data.extend_from_slice(&x.data()[off..off + len * plane]);
        }
        let value = Tensor::from_parts(vec![n, len, h, w], data);
        Ok(self.push(value, NarrowOp { input, start, len }))
    }

    /// Elements `start..start + len` of the flattened input, as a rank-1
    /// tensor.
    pub fn narrow_flat(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if len == 0 || start + len > x.numel() {
            return Err(Error::shape(
                "narrow_flat",
                format!("range {start}..{} outside 0..{}", start + len, x.numel()),
            ));
        }
        let value = Tensor::from_parts(vec![len], x.data()[start..start + len].to_vec());
        Ok(self.push(value, SliceOp { input, start }))
    }
}
