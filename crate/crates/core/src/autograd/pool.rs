use super::graph::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct MaxPoolOp {
    input: Var,
    /// Flat input index chosen for each output element.
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut dx = vec![0.0; ctx.value(self.input).numel()];
        for (&src, &g) in self.argmax.iter().zip(grad) {
            dx[src] += g;
        }
        vec![(self.input, dx)]
    }
}

impl Graph {
    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major order within the window, so the gradient is deterministic.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let x = self.value(input);
        let (n, c, h, w) = x
            .nchw()
            .map_err(|_| Error::shape(OP, format!("input must be NCHW, got {:?}", x.dims())))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                OP,
                format!("spatial dims must be even, got height {h}, width {w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let data = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] || (data[idx].is_nan() && !data[best].is_nan()) {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.push(value, MaxPoolOp { input, argmax }))
    }
}
