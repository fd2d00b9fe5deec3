//! Fixed-grid 2-D convolution and its transpose, lowered to GEMM via im2col.

use super::gemm::{gemm, Mat};
use super::graph::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights and hyper-parameters of a fixed-grid convolution.
///
/// `weight` is `(C_out, C_in, k, k)` for [`Graph::conv2d`] and
/// `(C_in, C_out, k, k)` for [`Graph::conv_transpose2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Evaluates `conv2d` on a throwaway graph.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w = g.constant(self.weight.clone());
        let b = self.bias.clone().map(|b| g.constant(b));
        let y = g.conv2d(x, w, b, self.stride, self.padding)?;
        Ok(g.value(y).clone())
    }

    pub fn forward_transposed(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w = g.constant(self.weight.clone());
        let b = self.bias.clone().map(|b| g.constant(b));
        let y = g.conv_transpose2d(x, w, b, self.stride, self.padding)?;
        Ok(g.value(y).clone())
    }
}

/// Sliding-window geometry of one image: `c` planes of `h x w` read by a
/// `k x k` window, giving an `ho x wo` grid of window positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }

    /// Output indices `lo..hi` whose read at kernel offset `kk` lands inside
    /// `0..extent`, and the input coordinate read by `lo`.
    #[inline]
    fn valid(&self, kk: usize, extent: usize, out_len: usize) -> (usize, usize, usize) {
        let s = self.stride;
        // first o with o*s + kk >= pad
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(s) };
        // first o with o*s + kk >= extent + pad
        let hi = (extent + self.pad).saturating_sub(kk).div_ceil(s).min(out_len);
        let lo = lo.min(hi);
        (lo, hi, (lo * s + kk).saturating_sub(self.pad))
    }
}

pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad >= k && stride > 0).then(|| (len + 2 * pad - k) / stride + 1)
}

/// Unfolds `x` (`c x h x w`) into `cols` (`c*k*k x ho*wo`); padding reads zero.
pub(crate) fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.cols_len());
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi, iy0) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi, ix0) = g.valid(kx, g.w, g.wo);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * g.wo].fill(0.0);
                dst[yhi * g.wo..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = iy0 + (oy - ylo) * g.stride;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = srow[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `x`.
pub(crate) fn col2im(cols: &[f64], g: &Geom, x: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.cols_len());
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi, iy0) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi, ix0) = g.valid(kx, g.w, g.wo);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = iy0 + (oy - ylo) * g.stride;
                    let line = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        drow[ix0..ix0 + line.len()]
                            .iter_mut()
                            .zip(line)
                            .for_each(|(a, b)| *a += b);
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            drow[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(op: &'static str, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (a, b, kh, kw) = w.nchw().map_err(|_| {
        Error::shape(op, format!("weight must be rank 4, got dims {:?}", w.dims()))
    })?;
    if kh != kw {
        return Err(Error::shape(
            op,
            format!("kernel height {kh} != kernel width {kw}"),
        ));
    }
    Ok((a, b, kh))
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(Error::shape(
                op,
                format!("bias length {} != output channels {channels}", b.numel()),
            ));
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, n: usize, c: usize, plane: usize) {
    if let Some(b) = bias {
        for (chunk, i) in out.chunks_mut(plane).zip((0..n * c).map(|i| i % c)) {
            let bv = b.data()[i];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(grad: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for (i, chunk) in grad.chunks(plane).enumerate().take(n * c) {
        db[i % c] += chunk.iter().sum::<f64>();
    }
    db
}

struct Conv2dOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Geom,
    cout: usize,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.weight];
        v.extend(self.bias);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input);
        let w = ctx.value(self.weight);
        let g = &self.geom;
        let n = x.dims()[0];
        let in_len = g.c * g.h * g.w;
        let plane = g.ho * g.wo;
        let out_len = self.cout * plane;
        let kdim = g.cols_rows();
        let need_x = ctx.needs(self.input);
        let need_w = ctx.needs(self.weight);

        let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
        let mut dw = vec![0.0; if need_w { w.numel() } else { 0 }];
        let mut cols = vec![0.0; g.cols_len()];
        let mut dcols = vec![0.0; if need_x { g.cols_len() } else { 0 }];
        for i in 0..n {
            let gout = Mat::new(&grad[i * out_len..(i + 1) * out_len], self.cout, plane);
            if need_w {
                im2col(&x.data()[i * in_len..(i + 1) * in_len], g, &mut cols);
                gemm(gout, Mat::new(&cols, kdim, plane).t(), 1.0, &mut dw);
            }
            if need_x {
                gemm(Mat::new(w.data(), self.cout, kdim).t(), gout, 0.0, &mut dcols);
                col2im(&dcols, g, &mut dx[i * in_len..(i + 1) * in_len]);
            }
        }
        let mut out = Vec::new();
        if need_x {
            out.push((self.input, dx));
        }
        if need_w {
            out.push((self.weight, dw));
        }
        if let Some(b) = self.bias.filter(|&b| ctx.needs(b)) {
            out.push((b, bias_grad(grad, n, self.cout, plane)));
        }
        out
    }
}

struct ConvTranspose2dOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    /// Geometry of the *output* image as read by the adjoint convolution.
    geom: Geom,
    cin: usize,
}

impl Backward for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.weight];
        v.extend(self.bias);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input);
        let w = ctx.value(self.weight);
        let g = &self.geom;
        let n = x.dims()[0];
        let in_plane = g.ho * g.wo;
        let in_len = self.cin * in_plane;
        let out_len = g.c * g.h * g.w;
        let kdim = g.cols_rows();
        let need_x = ctx.needs(self.input);
        let need_w = ctx.needs(self.weight);

        let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
        let mut dw = vec![0.0; if need_w { w.numel() } else { 0 }];
        let mut gcols = vec![0.0; g.cols_len()];
        for i in 0..n {
            im2col(&grad[i * out_len..(i + 1) * out_len], g, &mut gcols);
            let gc = Mat::new(&gcols, kdim, in_plane);
            if need_x {
                gemm(
                    Mat::new(w.data(), self.cin, kdim),
                    gc,
                    0.0,
                    &mut dx[i * in_len..(i + 1) * in_len],
                );
            }
            if need_w {
                let xi = Mat::new(&x.data()[i * in_len..(i + 1) * in_len], self.cin, in_plane);
                gemm(xi, gc.t(), 1.0, &mut dw);
            }
        }
        let mut out = Vec::new();
        if need_x {
            out.push((self.input, dx));
        }
        if need_w {
            out.push((self.weight, dw));
        }
        if let Some(b) = self.bias.filter(|&b| ctx.needs(b)) {
            out.push((b, bias_grad(grad, n, g.c, g.h * g.w)));
        }
        out
    }
}

impl Graph {
    /// Zero-padded cross-correlation. Output spatial size is
    /// `floor((H + 2*padding - k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let (n, c, h, w) = x
            .nchw()
            .map_err(|_| Error::shape(OP, format!("input must be NCHW, got {:?}", x.dims())))?;
        let wt = self.value(weight);
        let (cout, cin, k) = square_kernel(OP, wt)?;
        if c != cin {
            return Err(Error::shape(
                OP,
                format!("input channels {c} != weight C_in {cin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let ho = conv_out_len(h, k, stride, padding).ok_or_else(|| {
            Error::shape(OP, format!("padded height {} < kernel {k}", h + 2 * padding))
        })?;
        let wo = conv_out_len(w, k, stride, padding).ok_or_else(|| {
            Error::shape(OP, format!("padded width {} < kernel {k}", w + 2 * padding))
        })?;
        let b = bias.map(|b| self.value(b));
        check_bias(OP, b, cout)?;

        let geom = Geom {
            c,
            h,
            w,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let plane = ho * wo;
        let in_len = c * h * w;
        let mut out = vec![0.0; n * cout * plane];
        let mut cols = vec![0.0; geom.cols_len()];
        for i in 0..n {
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &geom, &mut cols);
            gemm(
                Mat::new(wt.data(), cout, geom.cols_rows()),
                Mat::new(&cols, geom.cols_rows(), plane),
                0.0,
                &mut out[i * cout * plane..(i + 1) * cout * plane],
            );
        }
        add_bias(&mut out, b, n, cout, plane);
        let value = Tensor::from_parts(vec![n, cout, ho, wo], out);
        Ok(self.push(
            value,
            Conv2dOp {
                input,
                weight,
                bias,
                geom,
                cout,
            },
        ))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] with the same
    /// stride and padding). Weight layout is `(C_in, C_out, k, k)`; output
    /// spatial size is `(H - 1) * stride - 2*padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let x = self.value(input);
        let (n, c, h, w) = x
            .nchw()
            .map_err(|_| Error::shape(OP, format!("input must be NCHW, got {:?}", x.dims())))?;
        let wt = self.value(weight);
        let (cin, cout, k) = square_kernel(OP, wt)?;
        if c != cin {
            return Err(Error::shape(
                OP,
                format!("input channels {c} != weight C_in {cin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let ho = ((h - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape(OP, "padding larger than the output extent"))?;
        let wo = ((w - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape(OP, "padding larger than the output extent"))?;
        let b = bias.map(|b| self.value(b));
        check_bias(OP, b, cout)?;

        let geom = Geom {
            c: cout,
            h: ho,
            w: wo,
            k,
            stride,
            pad: padding,
            ho: h,
            wo: w,
        };
        let in_plane = h * w;
        let out_len = cout * ho * wo;
        let kdim = geom.cols_rows();
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; geom.cols_len()];
        for i in 0..n {
            gemm(
                Mat::new(wt.data(), cin, kdim).t(),
                Mat::new(&x.data()[i * cin * in_plane..(i + 1) * cin * in_plane], cin, in_plane),
                0.0,
                &mut cols,
            );
            col2im(&cols, &geom, &mut out[i * out_len..(i + 1) * out_len]);
        }
        add_bias(&mut out, b, n, cout, ho * wo);
        let value = Tensor::from_parts(vec![n, cout, ho, wo], out);
        Ok(self.push(
            value,
            ConvTranspose2dOp {
                input,
                weight,
                bias,
                geom,
                cin,
            },
        ))
    }
}
