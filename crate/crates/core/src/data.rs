//! Synthetic ultrasound-like phantoms, geometric augmentation and quadrant
//! occlusion.
//!
//! Class 1 is a large rotated ellipse; in two-class mode class 2 is a small
//! ellipse placed against its rim. Continuous coordinates put the centre of
//! pixel `(y, x)` at `(y + 0.5, x + 0.5)`.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::pgm;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub num_fg_classes: usize,
    pub noise_std: f64,
    pub speckle: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 64,
            num_fg_classes: 2,
            noise_std: 0.05,
            speckle: true,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "data.image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if !(1..=2).contains(&self.num_fg_classes) {
            return Err(Error::Config(format!(
                "data.num_fg_classes must be 1 or 2, got {}",
                self.num_fg_classes
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "data.noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// A rotated ellipse in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    /// Rotation of the `ry` axis away from vertical, radians.
    pub theta: f64,
}

impl Ellipse {
    /// Whether the continuous point `(y, x)` lies inside (boundary included).
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u / self.ry).powi(2) + (v / self.rx).powi(2) <= 1.0
    }

    /// Pixels whose centre lies inside.
    pub fn rasterize(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }

    /// Distance from the centre to the boundary along direction `phi`
    /// (`phi = 0` points down the image, `pi/2` to the right).
    fn radius_towards(&self, phi: f64) -> f64 {
        let a = phi - self.theta;
        let (s, c) = a.sin_cos();
        1.0 / ((c / self.ry).powi(2) + (s / self.rx).powi(2)).sqrt()
    }
}

/// Shapes and intensities of one phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomLayout {
    /// One ellipse per foreground class; class `k` is `ellipses[k]`.
    pub ellipses: Vec<Ellipse>,
    pub background: f64,
    pub intensities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, H, W)` in `[0, 1]`.
    pub image: Tensor,
    /// `(C, H, W)` in `{0, 1}`; classes never overlap.
    pub mask: Tensor,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn classes(&self) -> usize {
        self.mask.dims()[0]
    }

    pub fn class_mask(&self, class: usize) -> BinaryMask {
        let s = self.size();
        let plane = &self.mask.data()[class * s * s..(class + 1) * s * s];
        BinaryMask::new(s, s, plane.iter().map(|&v| v > 0.5).collect()).expect("square plane")
    }

    pub fn class_present(&self, class: usize) -> bool {
        let s = self.size();
        self.mask.data()[class * s * s..(class + 1) * s * s]
            .iter()
            .any(|&v| v > 0.5)
    }
}

/// Pose and intensity draws for sample `index`.
pub fn phantom_layout(cfg: &PhantomConfig, index: u64) -> PhantomLayout {
    let mut rng = substream(cfg.seed, Stream::Phantom, index);
    let s = cfg.image_size as f64;
    let mid = s / 2.0;
    let background = rng.gen_range(0.15..0.3);
    if cfg.num_fg_classes == 1 {
        let e = Ellipse {
            cy: mid + rng.gen_range(-0.15..0.15) * s,
            cx: mid + rng.gen_range(-0.15..0.15) * s,
            ry: rng.gen_range(0.12..0.25) * s,
            rx: rng.gen_range(0.12..0.25) * s,
            theta: rng.gen_range(0.0..PI),
        };
        return PhantomLayout {
            ellipses: vec![e],
            background,
            intensities: vec![background + rng.gen_range(0.3..0.45)],
        };
    }
    let head = Ellipse {
        cy: mid + rng.gen_range(-0.08..0.08) * s,
        cx: mid + rng.gen_range(-0.08..0.08) * s,
        ry: rng.gen_range(0.2..0.3) * s,
        rx: rng.gen_range(0.16..0.24) * s,
        theta: rng.gen_range(0.0..PI),
    };
    let (ry, rx) = (rng.gen_range(0.07..0.1) * s, rng.gen_range(0.06..0.09) * s);
    let phi = rng.gen_range(0.0..2.0 * PI);
    // Blob centre sits just outside the head rim so that part of it remains
    // after the head is carved out.
    let reach = head.radius_towards(phi) + 0.6 * ry.min(rx);
    let clamp = |v: f64, r: f64| v.clamp(r + 1.0, s - r - 1.0);
    let blob = Ellipse {
        cy: clamp(head.cy + reach * phi.cos(), ry),
        cx: clamp(head.cx + reach * phi.sin(), ry),
        ry,
        rx,
        theta: rng.gen_range(0.0..PI),
    };
    PhantomLayout {
        ellipses: vec![head, blob],
        background,
        intensities: vec![
            background + rng.gen_range(0.3..0.4),
            background + rng.gen_range(0.45..0.6),
        ],
    }
}

/// Masks of a layout: each class is its ellipse minus all earlier classes.
pub fn layout_masks(layout: &PhantomLayout, size: usize) -> Vec<BinaryMask> {
    let mut taken = BinaryMask::empty(size, size);
    layout
        .ellipses
        .iter()
        .map(|e| {
            let raw = e.rasterize(size);
            let m = BinaryMask::from_fn(size, size, |y, x| raw.get(y, x) && !taken.get(y, x));
            for y in 0..size {
                for x in 0..size {
                    if m.get(y, x) {
                        taken.set(y, x, true);
                    }
                }
            }
            m
        })
        .collect()
}

/// Deterministic phantom `index`.
pub fn gen_phantom(cfg: &PhantomConfig, index: u64) -> Sample {
    let size = cfg.image_size;
    let layout = phantom_layout(cfg, index);
    let masks = layout_masks(&layout, size);
    let mut noise = substream(cfg.seed ^ 0x5eed, Stream::Phantom, index);
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = layout.background;
            for (m, &level) in masks.iter().zip(&layout.intensities) {
                if m.get(y, x) {
                    v = level;
                }
            }
            if cfg.speckle {
                let n: f64 = noise.sample(StandardNormal);
                v *= 1.0 + 0.25 * n;
            }
            if cfg.noise_std > 0.0 {
                let n: f64 = noise.sample(StandardNormal);
                v += cfg.noise_std * n;
            }
            image.push(v.clamp(0.0, 1.0));
        }
    }
    let mask = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&b| b as u8 as f64))
        .collect();
    Sample {
        image: Tensor::from_parts(vec![1, size, size], image),
        mask: Tensor::from_parts(vec![masks.len(), size, size], mask),
    }
}

/// One draw of the geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub zoom: f64,
    /// Degrees, counter-clockwise.
    pub angle_deg: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        zoom: 1.0,
        angle_deg: 0.0,
        flip: false,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            zoom: rng.gen_range(0.8..=1.2),
            angle_deg: rng.gen_range(-15.0..=15.0),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Output pixel `(y, x)` reads the input at the returned continuous pixel
/// index (not centre-shifted).
fn source_coord(p: &AugmentParams, size: usize, y: usize, x: usize) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let x = if p.flip { size - 1 - x } else { x };
    let (dy, dx) = (y as f64 - c, x as f64 - c);
    let (s, co) = p.angle_deg.to_radians().sin_cos();
    let sy = (co * dy - s * dx) / p.zoom;
    let sx = (s * dy + co * dx) / p.zoom;
    (c + sy, c + sx)
}

/// Bilinear read with edge replication.
fn sample_clamped(plane: &[f64], size: usize, y: f64, x: f64) -> f64 {
    let hi = (size - 1) as f64;
    let (y, x) = (y.clamp(0.0, hi), x.clamp(0.0, hi));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(size - 1), (x0 + 1).min(size - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * size + xx];
    (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1))
        + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1))
}

/// Applies one augmentation draw: bilinear resampling for the image, nearest
/// neighbour (outside reads background) for the mask.
pub fn apply_augment(s: &Sample, p: &AugmentParams) -> Sample {
    let size = s.size();
    let classes = s.classes();
    let img = s.image.data();
    let mut image = Vec::with_capacity(size * size);
    let mut mask = vec![0.0; classes * size * size];
    for y in 0..size {
        for x in 0..size {
            let (sy, sx) = source_coord(p, size, y, x);
            image.push(sample_clamped(img, size, sy, sx));
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && ny < size as f64 && nx < size as f64 {
                let src = ny as usize * size + nx as usize;
                for c in 0..classes {
                    mask[c * size * size + y * size + x] = s.mask.data()[c * size * size + src];
                }
            }
        }
    }
    Sample {
        image: Tensor::from_parts(vec![1, size, size], image),
        mask: Tensor::from_parts(vec![classes, size, size], mask),
    }
}

/// Random zoom, rotation and horizontal flip, deterministic in `seed`. If the
/// geometric part would erase a class that was present, only the flip is
/// applied.
pub fn augment(s: &Sample, seed: u64) -> Sample {
    let mut rng = substream(seed, Stream::Augment, 0);
    let p = AugmentParams::draw(&mut rng);
    let out = apply_augment(s, &p);
    let lost = (0..s.classes()).any(|c| s.class_present(c) && !out.class_present(c));
    if lost {
        return apply_augment(
            s,
            &AugmentParams {
                flip: p.flip,
                ..AugmentParams::IDENTITY
            },
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrant {
    TL,
    TR,
    BL,
    BR,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TL, Quadrant::TR, Quadrant::BL, Quadrant::BR];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TL => "TL",
            Quadrant::TR => "TR",
            Quadrant::BL => "BL",
            Quadrant::BR => "BR",
        }
    }

    /// Row and column ranges of the quadrant in an `h x w` plane.
    pub fn region(self, h: usize, w: usize) -> (Range<usize>, Range<usize>) {
        let (hh, hw) = (h / 2, w / 2);
        match self {
            Quadrant::TL => (0..hh, 0..hw),
            Quadrant::TR => (0..hh, hw..w),
            Quadrant::BL => (hh..h, 0..hw),
            Quadrant::BR => (hh..h, hw..w),
        }
    }
}

/// Zeroes quadrant `q` of every `H x W` plane of `image` (the last two dims).
pub fn quadrant_mask(image: &Tensor, q: Quadrant) -> Result<Tensor> {
    let dims = image.dims();
    if dims.len() < 2 {
        return Err(Error::shape(
            "quadrant_mask",
            format!("need at least 2 dims, got {dims:?}"),
        ));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "quadrant_mask",
            format!("spatial dims {h}x{w} must be even"),
        ));
    }
    let (rows, cols) = q.region(h, w);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in rows.clone() {
            plane[y * w + cols.start..y * w + cols.end].fill(0.0);
        }
    }
    Ok(out)
}

/// Disjoint sample-index ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<u64>,
    pub val: Range<u64>,
    pub test: Range<u64>,
}

impl Splits {
    pub fn from_ranges(train: Range<u64>, val: Range<u64>, test: Range<u64>) -> Result<Self> {
        let parts = [("train", &train), ("val", &val), ("test", &test)];
        for (i, (na, a)) in parts.iter().enumerate() {
            for (nb, b) in &parts[i + 1..] {
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Config(format!(
                        "{na} range {a:?} overlaps {nb} range {b:?}"
                    )));
                }
            }
        }
        Ok(Splits { train, val, test })
    }
}

/// Consecutive ranges `[0, n_train)`, then validation, then test.
pub fn make_splits(n_train: u64, n_val: u64, n_test: u64) -> Result<Splits> {
    let v = n_train;
    let t = v + n_val;
    Splits::from_ranges(0..v, v..t, t..t + n_test)
}

/// Permutation of `0..n` for `epoch`, from the shuffle stream of `seed`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Stream::Shuffle, epoch));
    order
}

/// Pre-generated samples for an index range.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub indices: Vec<u64>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &PhantomConfig, range: Range<u64>) -> Self {
        let indices: Vec<u64> = range.collect();
        let samples = indices.iter().map(|&i| gen_phantom(cfg, i)).collect();
        Dataset { indices, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks samples into `(N, 1, H, W)` images and `(N, C, H, W)` masks.
    pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
        let stack = |get: fn(&Sample) -> &Tensor| -> Result<Tensor> {
            let first = get(samples.first().ok_or_else(|| Error::invalid("batch", "no samples"))?);
            let mut dims = vec![samples.len()];
            dims.extend_from_slice(first.dims());
            let mut data = Vec::with_capacity(first.numel() * samples.len());
            for s in samples {
                if get(s).dims() != first.dims() {
                    return Err(Error::shape(
                        "batch",
                        format!("sample dims {:?} differ from {:?}", get(s).dims(), first.dims()),
                    ));
                }
                data.extend_from_slice(get(s).data());
            }
            Tensor::new(&dims, data)
        };
        Ok((stack(|s| &s.image)?, stack(|s| &s.mask)?))
    }
}

/// Label map for visual comparison: 0 for background, `255 (c + 1) / C` for
/// class `c` (later classes win on overlap).
pub fn label_map(masks: &[BinaryMask]) -> Vec<u8> {
    let (h, w) = masks[0].dims();
    let c = masks.len();
    let mut out = vec![0u8; h * w];
    for (k, m) in masks.iter().enumerate() {
        let level = (255 * (k + 1) / c) as u8;
        for (o, &b) in out.iter_mut().zip(m.data()) {
            if b {
                *o = level;
            }
        }
    }
    out
}

/// Writes `<stem>_image.pgm` and one `<stem>_class<k>.pgm` (0/255) per class.
pub fn export_sample(s: &Sample, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let size = s.size();
    let mut written = Vec::new();
    let img: Vec<u8> = s
        .image
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let p = dir.join(format!("{stem}_image.pgm"));
    pgm::write_pgm(&p, size, size, &img)?;
    written.push(p);
    for c in 0..s.classes() {
        let m: Vec<u8> = s.class_mask(c).data().iter().map(|&b| if b { 255 } else { 0 }).collect();
        let p = dir.join(format!("{stem}_class{}.pgm", c + 1));
        pgm::write_pgm(&p, size, size, &m)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_hand_case() {
        let t = Tensor::ones(&[1, 4, 4]);
        let m = quadrant_mask(&t, Quadrant::TL).unwrap();
        let expect = [
            0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 1., 1., 1., 1., 1., 1.,
        ];
        assert_eq!(m.data(), &expect);
        assert!(quadrant_mask(&Tensor::ones(&[1, 3, 4]), Quadrant::TL).is_err());
    }

    #[test]
    fn splits_are_consecutive_and_checked() {
        let s = make_splits(200, 50, 50).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..200, 200..250, 250..300));
        assert!(Splits::from_ranges(0..10, 5..15, 20..30).is_err());
    }

    #[test]
    fn two_class_phantoms_have_both_classes() {
        let cfg = PhantomConfig::default();
        for i in 0..50 {
            let s = gen_phantom(&cfg, i);
            assert!(s.class_present(0) && s.class_present(1), "sample {i}");
        }
    }
}
