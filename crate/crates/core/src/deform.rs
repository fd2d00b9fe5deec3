//! Modulated deformable convolution (DCNv2).
//!
//! For an output location `p` and kernel tap `k` the layer samples the input
//! at `p + k + Δp_k` with bilinear interpolation and weights the sample by a
//! modulation scalar `α_k ∈ (0, 1)`:
//!
//! ```text
//! Y(p) = Σ_k α_k(p) · W(k) · F(p + k + Δp_k(p)) + b
//! ```
//!
//! Offsets and modulation come from an auxiliary 3x3 convolution over the
//! layer input: its first `2K²` channels are the offsets, interleaved
//! `[Δy_0, Δx_0, Δy_1, Δx_1, ...]` with taps in row-major order, and the last
//! `K²` channels pass through a sigmoid to give `α`. The auxiliary branch
//! starts at zero, so an untrained layer is half of a standard convolution
//! plus bias.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autograd::{gemm, Backward, BackwardCtx, Conv2dParams, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;

/// The only kernel size the deformable layer supports.
pub const DEFORM_KERNEL: usize = 3;

/// Integer tap offsets of a `k x k` kernel, row-major from
/// `(-k/2, -k/2)` to `(k/2, k/2)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveGrid {
    k: usize,
    taps: Vec<(isize, isize)>,
}

impl ReceptiveGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::invalid(
                "receptive_grid",
                format!("kernel size must be odd, got {k}"),
            ));
        }
        let r = (k / 2) as isize;
        let taps = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .collect();
        Ok(ReceptiveGrid { k, taps })
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn taps(&self) -> &[(isize, isize)] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn center(&self) -> usize {
        self.taps.len() / 2
    }
}

/// Per-position sampling offsets `(N, 2K², H, W)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField(Tensor);

impl OffsetField {
    pub fn new(t: Tensor, taps: usize) -> Result<Self> {
        let (_, c, _, _) = t.nchw()?;
        if c != 2 * taps {
            return Err(Error::shape(
                "offset_field",
                format!("channels {c} != 2 * taps ({})", 2 * taps),
            ));
        }
        Ok(OffsetField(t))
    }

    pub fn taps(&self) -> usize {
        self.0.dims()[1] / 2
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(Δy, Δx)` of `tap` at `(y, x)` in batch element `n`.
    pub fn get(&self, n: usize, tap: usize, y: usize, x: usize) -> (f64, f64) {
        (self.0.at(n, 2 * tap, y, x), self.0.at(n, 2 * tap + 1, y, x))
    }
}

/// Per-position modulation scalars `(N, K², H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationField(Tensor);

impl ModulationField {
    pub fn new(t: Tensor, taps: usize) -> Result<Self> {
        let (_, c, _, _) = t.nchw()?;
        if c != taps {
            return Err(Error::shape(
                "modulation_field",
                format!("channels {c} != taps {taps}"),
            ));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "modulation_field",
                "values must lie in [0, 1]",
            ));
        }
        Ok(ModulationField(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Bilinear read of plane `h x w` at real coordinates; neighbours outside
/// the plane read as zero.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    BilinearTap::new(h, w, y, x).value(plane)
}

/// Four-neighbour stencil of one fractional sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    /// Flat plane indices of (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    idx: [Option<usize>; 4],
    ly: f64,
    lx: f64,
}

impl BilinearTap {
    pub fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let (y0, x0) = (y.floor(), x.floor());
        let at = |yy: f64, xx: f64| {
            (yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64)
                .then(|| yy as usize * w + xx as usize)
        };
        BilinearTap {
            idx: [
                at(y0, x0),
                at(y0, x0 + 1.0),
                at(y0 + 1.0, x0),
                at(y0 + 1.0, x0 + 1.0),
            ],
            ly: y - y0,
            lx: x - x0,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (ly, lx) = (self.ly, self.lx);
        [
            (1.0 - ly) * (1.0 - lx),
            (1.0 - ly) * lx,
            ly * (1.0 - lx),
            ly * lx,
        ]
    }

    #[inline]
    fn corners(&self, plane: &[f64]) -> [f64; 4] {
        self.idx.map(|i| i.map_or(0.0, |i| plane[i]))
    }

    #[inline]
    pub fn value(&self, plane: &[f64]) -> f64 {
        let v = self.corners(plane);
        let wt = self.weights();
        v[0] * wt[0] + v[1] * wt[1] + v[2] * wt[2] + v[3] * wt[3]
    }

    /// Value and partial derivatives w.r.t. `(y, x)`. At integer coordinates
    /// this is the right-hand derivative of the piecewise-linear kernel.
    #[inline]
    pub fn value_and_grad(&self, plane: &[f64]) -> (f64, f64, f64) {
        let v = self.corners(plane);
        let wt = self.weights();
        let value = v[0] * wt[0] + v[1] * wt[1] + v[2] * wt[2] + v[3] * wt[3];
        let dy = (1.0 - self.lx) * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = (1.0 - self.ly) * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (value, dy, dx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], scale: f64) {
        let wt = self.weights();
        for (i, wv) in self.idx.iter().zip(wt) {
            if let Some(i) = i {
                plane[*i] += scale * wv;
            }
        }
    }
}

/// Precomputes every tap stencil of one batch element: index `t * HW + p`.
fn stencils(grid: &ReceptiveGrid, offsets: &[f64], h: usize, w: usize) -> Vec<BilinearTap> {
    let plane = h * w;
    let mut out = Vec::with_capacity(grid.len() * plane);
    for (t, &(ty, tx)) in grid.taps().iter().enumerate() {
        let oy = &offsets[2 * t * plane..(2 * t + 1) * plane];
        let ox = &offsets[(2 * t + 1) * plane..(2 * t + 2) * plane];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let sy = (py as isize + ty) as f64 + oy[p];
                let sx = (px as isize + tx) as f64 + ox[p];
                out.push(BilinearTap::new(h, w, sy, sx));
            }
        }
    }
    out
}

/// Modulated samples laid out like im2col columns: row `ci * K² + t`.
fn deform_columns(
    x: &[f64],
    cin: usize,
    plane: usize,
    taps: &[BilinearTap],
    modulation: &[f64],
    k2: usize,
    cols: &mut [f64],
) {
    for ci in 0..cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for t in 0..k2 {
            let row = &mut cols[(ci * k2 + t) * plane..(ci * k2 + t + 1) * plane];
            let st = &taps[t * plane..(t + 1) * plane];
            let md = &modulation[t * plane..(t + 1) * plane];
            for p in 0..plane {
                row[p] = md[p] * st[p].value(src);
            }
        }
    }
}

struct DeformSampleOp {
    input: Var,
    offsets: Var,
    modulation: Var,
    weight: Var,
    bias: Option<Var>,
    grid: ReceptiveGrid,
}

impl Backward for DeformSampleOp {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.offsets, self.modulation, self.weight];
        v.extend(self.bias);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = ctx.value(self.input);
        let off = ctx.value(self.offsets);
        let md = ctx.value(self.modulation);
        let wt = ctx.value(self.weight);
        let (n, cin, h, w) = x.nchw().expect("deform input is NCHW");
        let cout = wt.dims()[0];
        let k2 = self.grid.len();
        let plane = h * w;
        let kdim = cin * k2;

        let need_x = ctx.needs(self.input);
        let need_off = ctx.needs(self.offsets);
        let need_md = ctx.needs(self.modulation);
        let need_w = ctx.needs(self.weight);
        let need_sampling = need_x || need_off || need_md;

        let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
        let mut doff = vec![0.0; if need_off { off.numel() } else { 0 }];
        let mut dmd = vec![0.0; if need_md { md.numel() } else { 0 }];
        let mut dw = vec![0.0; if need_w { wt.numel() } else { 0 }];
        let mut cols = vec![0.0; kdim * plane];
        let mut dcols = vec![0.0; kdim * plane];

        for i in 0..n {
            let xi = &x.data()[i * cin * plane..(i + 1) * cin * plane];
            let oi = &off.data()[i * 2 * k2 * plane..(i + 1) * 2 * k2 * plane];
            let mi = &md.data()[i * k2 * plane..(i + 1) * k2 * plane];
            let gout = Mat::new(&grad[i * cout * plane..(i + 1) * cout * plane], cout, plane);
            let taps = stencils(&self.grid, oi, h, w);
            if need_w {
                deform_columns(xi, cin, plane, &taps, mi, k2, &mut cols);
                gemm(gout, Mat::new(&cols, kdim, plane).t(), 1.0, &mut dw);
            }
            if !need_sampling {
                continue;
            }
            gemm(Mat::new(wt.data(), cout, kdim).t(), gout, 0.0, &mut dcols);
            for ci in 0..cin {
                let src = &xi[ci * plane..(ci + 1) * plane];
                for t in 0..k2 {
                    let row = &dcols[(ci * k2 + t) * plane..(ci * k2 + t + 1) * plane];
                    for p in 0..plane {
                        let dc = row[p];
                        if dc == 0.0 {
                            continue;
                        }
                        let st = &taps[t * plane + p];
                        let alpha = mi[t * plane + p];
                        let (v, dvy, dvx) = st.value_and_grad(src);
                        if need_md {
                            dmd[(i * k2 + t) * plane + p] += dc * v;
                        }
                        if need_off {
                            let base = (i * 2 * k2 + 2 * t) * plane + p;
                            doff[base] += dc * alpha * dvy;
                            doff[base + plane] += dc * alpha * dvx;
                        }
                        if need_x {
                            let dst = &mut dx[(i * cin + ci) * plane..(i * cin + ci + 1) * plane];
                            st.scatter(dst, dc * alpha);
                        }
                    }
                }
            }
        }

        let mut out = Vec::new();
        if need_x {
            out.push((self.input, dx));
        }
        if need_off {
            out.push((self.offsets, doff));
        }
        if need_md {
            out.push((self.modulation, dmd));
        }
        if need_w {
            out.push((self.weight, dw));
        }
        if let Some(b) = self.bias.filter(|&b| ctx.needs(b)) {
            let mut db = vec![0.0; cout];
            for (j, chunk) in grad.chunks(plane).enumerate() {
                db[j % cout] += chunk.iter().sum::<f64>();
            }
            out.push((b, db));
        }
        out
    }
}

impl Graph {
    /// Deformable 3x3 convolution (stride 1, padding 1) driven by explicit
    /// offset and modulation tensors. The bias is added once per output
    /// location and is not modulated.
    pub fn deform_conv_sample(
        &mut self,
        input: Var,
        offsets: Var,
        modulation: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        const OP: &str = "deform_conv2d";
        let x = self.value(input);
        let (n, cin, h, w) = x.nchw()?;
        let wt = self.value(weight);
        let (cout, wcin, kh, kw) = wt.nchw()?;
        if (kh, kw) != (DEFORM_KERNEL, DEFORM_KERNEL) {
            return Err(Error::invalid(
                OP,
                format!("only {DEFORM_KERNEL}x{DEFORM_KERNEL} kernels are supported, got {kh}x{kw}"),
            ));
        }
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channels {cin} != weight C_in {wcin}"),
            ));
        }
        let grid = ReceptiveGrid::new(DEFORM_KERNEL)?;
        let k2 = grid.len();
        let off = self.value(offsets);
        if off.dims() != [n, 2 * k2, h, w] {
            return Err(Error::shape(
                OP,
                format!("offsets dims {:?} != {:?}", off.dims(), [n, 2 * k2, h, w]),
            ));
        }
        let md = self.value(modulation);
        if md.dims() != [n, k2, h, w] {
            return Err(Error::shape(
                OP,
                format!("modulation dims {:?} != {:?}", md.dims(), [n, k2, h, w]),
            ));
        }
        let b = bias.map(|b| self.value(b));
        if let Some(b) = b {
            if b.numel() != cout {
                return Err(Error::shape(
                    OP,
                    format!("bias length {} != output channels {cout}", b.numel()),
                ));
            }
        }

        let plane = h * w;
        let kdim = cin * k2;
        let mut out = vec![0.0; n * cout * plane];
        let mut cols = vec![0.0; kdim * plane];
        for i in 0..n {
            let xi = &x.data()[i * cin * plane..(i + 1) * cin * plane];
            let oi = &off.data()[i * 2 * k2 * plane..(i + 1) * 2 * k2 * plane];
            let mi = &md.data()[i * k2 * plane..(i + 1) * k2 * plane];
            let taps = stencils(&grid, oi, h, w);
            deform_columns(xi, cin, plane, &taps, mi, k2, &mut cols);
            gemm(
                Mat::new(wt.data(), cout, kdim),
                Mat::new(&cols, kdim, plane),
                0.0,
                &mut out[i * cout * plane..(i + 1) * cout * plane],
            );
        }
        if let Some(b) = b {
            for (j, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = b.data()[j % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::from_parts(vec![n, cout, h, w], out);
        Ok(self.push(
            value,
            DeformSampleOp {
                input,
                offsets,
                modulation,
                weight,
                bias,
                grid,
            },
        ))
    }
}

/// Graph handles for the parameters of one deformable layer.
#[derive(Clone, Copy, Debug)]
pub struct DeformConvVars {
    pub main_weight: Var,
    pub main_bias: Option<Var>,
    pub branch_weight: Var,
    pub branch_bias: Var,
}

/// Output of [`deform_conv2d`] plus the graph-internal fields it used.
#[derive(Clone, Copy, Debug)]
pub struct DeformOutput {
    pub output: Var,
    pub offsets: Var,
    pub modulation: Var,
}

/// Auxiliary branch: a 3x3 convolution with `3K²` outputs, split into raw
/// offsets and sigmoid modulation.
pub fn offset_mod_branch(
    g: &mut Graph,
    input: Var,
    branch_weight: Var,
    branch_bias: Var,
) -> Result<(Var, Var)> {
    let k2 = DEFORM_KERNEL * DEFORM_KERNEL;
    let cout = g.value(branch_weight).dims()[0];
    if cout != 3 * k2 {
        return Err(Error::shape(
            "offset_mod_branch",
            format!("branch output channels {cout} != 3 * K^2 ({})", 3 * k2),
        ));
    }
    let raw = g.conv2d(input, branch_weight, Some(branch_bias), 1, 1)?;
    let offsets = g.narrow_channels(raw, 0, 2 * k2)?;
    let logits = g.narrow_channels(raw, 2 * k2, k2)?;
    let modulation = g.sigmoid(logits);
    Ok((offsets, modulation))
}

pub fn deform_conv2d(g: &mut Graph, input: Var, p: &DeformConvVars) -> Result<DeformOutput> {
    let (offsets, modulation) = offset_mod_branch(g, input, p.branch_weight, p.branch_bias)?;
    let output = g.deform_conv_sample(input, offsets, modulation, p.main_weight, p.main_bias)?;
    Ok(DeformOutput {
        output,
        offsets,
        modulation,
    })
}

/// Owned parameters of a deformable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformConvParams {
    /// `(C_out, C_in, 3, 3)`
    pub main_weight: Tensor,
    pub main_bias: Tensor,
    /// 3x3, stride 1, padding 1, `3K²` output channels.
    pub branch: Conv2dParams,
}

impl DeformConvParams {
    /// Fan-in uniform main weights, zero bias, zero auxiliary branch.
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let k = DEFORM_KERNEL;
        let bound = (1.0 / (cin * k * k) as f64).sqrt();
        let k2 = k * k;
        DeformConvParams {
            main_weight: Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
            main_bias: Tensor::zeros(&[cout]),
            branch: Conv2dParams::new(
                Tensor::zeros(&[3 * k2, cin, k, k]),
                Some(Tensor::zeros(&[3 * k2])),
                1,
                1,
            ),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DeformConvVars {
        let branch_bias = self
            .branch
            .bias
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&[self.branch.weight.dims()[0]]));
        DeformConvVars {
            main_weight: g.leaf(self.main_weight.clone(), trainable),
            main_bias: Some(g.leaf(self.main_bias.clone(), trainable)),
            branch_weight: g.leaf(self.branch.weight.clone(), trainable),
            branch_bias: g.leaf(branch_bias, trainable),
        }
    }

    /// Forward pass returning the output and the predicted fields.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, OffsetField, ModulationField)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let vars = self.bind(&mut g, false);
        let out = deform_conv2d(&mut g, x, &vars)?;
        let k2 = DEFORM_KERNEL * DEFORM_KERNEL;
        Ok((
            g.value(out.output).clone(),
            OffsetField::new(g.value(out.offsets).clone(), k2)?,
            ModulationField::new(g.value(out.modulation).clone(), k2)?,
        ))
    }
}

/// Writes the offsets of batch element `n` as CSV (`y,x,tap,dy,dx`, one row
/// per position and tap) and as a P5 heatmap of the per-pixel mean offset
/// length, min-max scaled to 0..=255 (all zero when the field is uniform).
pub fn export_offsets(field: &OffsetField, n: usize, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    let (nn, _, h, w) = field.tensor().nchw()?;
    if n >= nn {
        return Err(Error::shape(
            "export_offsets",
            format!("batch index {n} out of range for batch {nn}"),
        ));
    }
    let taps = field.taps();
    let mut csv = String::from("y,x,tap,dy,dx\n");
    let mut magnitude = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for t in 0..taps {
                let (dy, dx) = field.get(n, t, y, x);
                let _ = writeln!(csv, "{y},{x},{t},{dy},{dx}");
                magnitude[y * w + x] += (dy * dy + dx * dx).sqrt() / taps as f64;
            }
        }
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    pgm::write_pgm(pgm_path, w, h, &pgm::normalize_to_u8(&magnitude))
}

/// Parses an offsets CSV written by [`export_offsets`] back into a field
/// with `N = 1`.
pub fn read_offsets_csv(path: &Path) -> Result<OffsetField> {
    const OP: &str = "read_offsets_csv";
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid(OP, format!("line {}: malformed row `{line}`", lineno + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let y: usize = f[0].parse().map_err(|_| bad())?;
        let x: usize = f[1].parse().map_err(|_| bad())?;
        let t: usize = f[2].parse().map_err(|_| bad())?;
        let dy: f64 = f[3].parse().map_err(|_| bad())?;
        let dx: f64 = f[4].parse().map_err(|_| bad())?;
        rows.push((y, x, t, dy, dx));
    }
    let h = rows.iter().map(|r| r.0).max().map(|v| v + 1).unwrap_or(0);
    let w = rows.iter().map(|r| r.1).max().map(|v| v + 1).unwrap_or(0);
    let taps = rows.iter().map(|r| r.2).max().map(|v| v + 1).unwrap_or(0);
    if rows.len() != h * w * taps || rows.is_empty() {
        return Err(Error::invalid(OP, "rows do not cover a full (y, x, tap) grid"));
    }
    let mut data = vec![0.0; 2 * taps * h * w];
    for (y, x, t, dy, dx) in rows {
        data[(2 * t * h + y) * w + x] = dy;
        data[((2 * t + 1) * h + y) * w + x] = dx;
    }
    OffsetField::new(Tensor::new(&[1, 2 * taps, h, w], data)?, taps)
}
