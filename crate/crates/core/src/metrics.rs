//! Overlap and boundary-distance metrics on binary masks, in pixel units.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(
                "binary_mask",
                format!("{} values for a {height}x{width} mask", data.len()),
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask {
            height,
            width,
            data,
        }
    }

    /// Plane `(n, c)` of a `{0, 1}` tensor (any value above 0.5 is set).
    pub fn from_plane(t: &Tensor, n: usize, c: usize) -> Result<Self> {
        let (nn, cc, h, w) = t.nchw()?;
        if n >= nn || c >= cc {
            return Err(Error::shape(
                "binary_mask",
                format!("plane ({n}, {c}) outside a {nn}x{cc} batch"),
            ));
        }
        let off = (n * cc + c) * h * w;
        Ok(BinaryMask {
            height: h,
            width: w,
            data: t.data()[off..off + h * w].iter().map(|&v| v > 0.5).collect(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_same_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("mask dims {:?} != {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }
}

/// Per-sample, per-class masks `logit > 0` (probability strictly above 0.5).
pub fn binarize(logits: &Tensor) -> Result<Vec<Vec<BinaryMask>>> {
    let (n, c, h, w) = logits.nchw()?;
    Ok((0..n)
        .map(|ni| {
            (0..c)
                .map(|ci| {
                    let off = (ni * c + ci) * h * w;
                    let data = logits.data()[off..off + h * w].iter().map(|&z| z > 0.0).collect();
                    BinaryMask {
                        height: h,
                        width: w,
                        data,
                    }
                })
                .collect()
        })
        .collect())
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dsc(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same_dims(g, "dsc")?;
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.data.iter().zip(&g.data) {
        inter += (a && b) as usize;
        sp += a as usize;
        sg += b as usize;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

/// Mask pixels with at least one 4-neighbour outside the mask or outside the
/// image, in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundarySet {
    points: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_boundary(m: &BinaryMask) -> Result<BoundarySet> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (h, w) = m.dims();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize)
    };
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dy, dx)| !inside(yi + dy, xi + dx));
            if edge {
                points.push((y, x));
            }
        }
    }
    Ok(BoundarySet { points })
}

/// For each point of `a`, the Euclidean distance to the nearest point of `b`.
pub fn directed_distances(a: &BoundarySet, b: &BoundarySet) -> Vec<f64> {
    a.points
        .iter()
        .map(|&(ay, ax)| {
            let best = b
                .points
                .iter()
                .map(|&(by, bx)| {
                    let dy = ay as i64 - by as i64;
                    let dx = ax as i64 - bx as i64;
                    dy * dy + dx * dx
                })
                .min()
                .expect("non-empty boundary");
            (best as f64).sqrt()
        })
        .collect()
}

/// `q`-th percentile (0..=100) with linear interpolation between the closest
/// ranks of the sorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// How the two boundary directions are combined into HD95.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Mode {
    /// Maximum of the two directed 95th percentiles.
    #[default]
    DirectedMax,
    /// 95th percentile of both directions' distances pooled together.
    Pooled,
}

fn boundaries(p: &BinaryMask, g: &BinaryMask, op: &'static str) -> Result<(BoundarySet, BoundarySet)> {
    p.check_same_dims(g, op)?;
    Ok((extract_boundary(p)?, extract_boundary(g)?))
}

pub fn hd95(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    hd95_with(p, g, Hd95Mode::DirectedMax)
}

pub fn hd95_with(p: &BinaryMask, g: &BinaryMask, mode: Hd95Mode) -> Result<f64> {
    let (bp, bg) = boundaries(p, g, "hd95")?;
    let d_pg = directed_distances(&bp, &bg);
    let d_gp = directed_distances(&bg, &bp);
    Ok(match mode {
        Hd95Mode::DirectedMax => percentile(&d_pg, 95.0).max(percentile(&d_gp, 95.0)),
        Hd95Mode::Pooled => {
            let mut all = d_pg;
            all.extend(d_gp);
            percentile(&all, 95.0)
        }
    })
}

/// Mean of the nearest-boundary distances taken in both directions.
pub fn asd(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let (bp, bg) = boundaries(p, g, "asd")?;
    let total: f64 = directed_distances(&bp, &bg).iter().sum::<f64>()
        + directed_distances(&bg, &bp).iter().sum::<f64>();
    Ok(total / (bp.len() + bg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: usize,
    pub class: usize,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl MetricRow {
    pub fn skipped(&self) -> bool {
        self.hd95.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_CSV_HEADER: &str = "sample_id,class,dsc,hd95,asd,skipped";

impl MetricsReport {
    /// Scores one (prediction, ground truth) pair; pairs with an empty mask
    /// get DSC only and count as skipped for the distance metrics.
    pub fn push_pair(
        &mut self,
        sample_id: usize,
        class: usize,
        pred: &BinaryMask,
        truth: &BinaryMask,
        mode: Hd95Mode,
    ) -> Result<()> {
        let d = dsc(pred, truth)?;
        let (hd, sd) = if pred.is_empty() || truth.is_empty() {
            (None, None)
        } else {
            (Some(hd95_with(pred, truth, mode)?), Some(asd(pred, truth)?))
        };
        self.rows.push(MetricRow {
            sample_id,
            class,
            dsc: d,
            hd95: hd,
            asd: sd,
        });
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.rows.iter().map(|r| r.class + 1).max().unwrap_or(0)
    }

    pub fn skipped(&self) -> usize {
        self.rows.iter().filter(|r| r.skipped()).count()
    }

    fn mean_of(&self, class: Option<usize>, f: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| class.is_none_or(|c| r.class == c))
            .filter_map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn class_dsc(&self, class: usize) -> Option<f64> {
        self.mean_of(Some(class), |r| Some(r.dsc))
    }

    pub fn class_hd95(&self, class: usize) -> Option<f64> {
        self.mean_of(Some(class), |r| r.hd95)
    }

    pub fn class_asd(&self, class: usize) -> Option<f64> {
        self.mean_of(Some(class), |r| r.asd)
    }

    fn macro_mean(&self, per_class: impl Fn(usize) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = (0..self.classes()).filter_map(per_class).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Macro mean over classes of the per-class mean DSC (0 for an empty report).
    pub fn mean_dsc(&self) -> f64 {
        self.macro_mean(|c| self.class_dsc(c)).unwrap_or(0.0)
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        self.macro_mean(|c| self.class_hd95(c))
    }

    pub fn mean_asd(&self) -> Option<f64> {
        self.macro_mean(|c| self.class_asd(c))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.sample_id,
                r.class,
                r.dsc,
                opt(r.hd95),
                opt(r.asd),
                r.skipped() as u8
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| pts.contains(&(y, x)))
    }

    #[test]
    fn dsc_hand_cases() {
        let p = points(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let g = points(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)]);
        assert_eq!(dsc(&p, &g).unwrap(), 0.5);
        assert_eq!(dsc(&p, &p).unwrap(), 1.0);
        assert_eq!(dsc(&p, &points(4, 4, &[(3, 3)])).unwrap(), 0.0);
        assert_eq!(dsc(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 4)).unwrap(), 1.0);
    }

    #[test]
    fn three_pixel_separation() {
        let p = points(5, 8, &[(2, 1)]);
        let g = points(5, 8, &[(2, 4)]);
        assert_eq!(hd95(&p, &g).unwrap(), 3.0);
        assert_eq!(asd(&p, &g).unwrap(), 3.0);
    }

    #[test]
    fn binarize_uses_strict_inequality() {
        let t = Tensor::new(&[1, 1, 1, 3], vec![0.01, -0.01, 0.0]).unwrap();
        assert_eq!(binarize(&t).unwrap()[0][0].data(), &[true, false, false]);
    }

    #[test]
    fn full_image_boundary_is_the_border_ring() {
        let m = BinaryMask::from_fn(5, 6, |_, _| true);
        assert_eq!(extract_boundary(&m).unwrap().len(), 2 * 5 + 2 * 6 - 4);
        assert!(matches!(
            extract_boundary(&BinaryMask::empty(3, 3)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }
}
