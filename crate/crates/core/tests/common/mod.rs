//! Literal-definition oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use daunet::metrics::BinaryMask;
use daunet::Tensor;

pub const K: usize = 3;
pub const K2: usize = K * K;

/// Leave-one-out energy straight from its definition, O(M^2) per plane.
pub fn literal_energy(x: &Tensor, lambda: f64) -> Tensor {
    let (_, _, h, w) = x.nchw().unwrap();
    let m = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(m) {
        for t in 0..m {
            let others: Vec<f64> = (0..m).filter(|&i| i != t).map(|i| plane[i]).collect();
            let mu = others.iter().sum::<f64>() / (m - 1) as f64;
            let spread: f64 = others.iter().map(|v| (v - mu).powi(2)).sum();
            out.push((plane[t] - mu).powi(2) + lambda * spread);
        }
    }
    Tensor::new(x.dims(), out).unwrap()
}

/// Bilinear interpolation written out from the four-corner formula.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let read = |yy: i64, xx: i64| {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let (y0, x0) = (y.floor() as i64, x.floor() as i64);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    read(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + read(y0, x0 + 1) * (1.0 - fy) * fx
        + read(y0 + 1, x0) * fy * (1.0 - fx)
        + read(y0 + 1, x0 + 1) * fy * fx
}

/// Modulated deformable convolution evaluated term by term.
pub fn literal_deform(x: &Tensor, off: &Tensor, m: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, wd) = x.nchw().unwrap();
    let o = w.dims()[0];
    Tensor::from_fn(&[n, o, h, wd], |i| {
        let xx = i % wd;
        let y = (i / wd) % h;
        let oi = (i / (wd * h)) % o;
        let ni = i / (wd * h * o);
        let mut acc = b.data()[oi];
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
            for t in 0..K2 {
                let (ky, kx) = (t / K, t % K);
                let dy = off.at(ni, 2 * t, y, xx);
                let dx = off.at(ni, 2 * t + 1, y, xx);
                let py = y as f64 + ky as f64 - 1.0 + dy;
                let px = xx as f64 + kx as f64 - 1.0 + dx;
                acc += w.at(oi, ci, ky, kx) * m.at(ni, t, y, xx) * bilinear(plane, h, wd, py, px);
            }
        }
        acc
    })
}

/// Foreground pixels that the 4-neighbourhood erosion removes (pixels past
/// the image border count as background).
pub fn oracle_boundary(m: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = m.dims();
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let eroded = fg(y, x) && fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1);
            if fg(y, x) && !eroded {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

pub fn nearest(from: &[(f64, f64)], to: &[(f64, f64)]) -> Vec<f64> {
    from.iter()
        .map(|a| to.iter().map(|b| (a.0 - b.0).hypot(a.1 - b.1)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn p95(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (s.len() as f64 - 1.0);
    let below = pos.floor() as usize;
    let above = pos.ceil() as usize;
    s[below] + (pos - below as f64) * (s[above] - s[below])
}

pub fn oracle_dsc(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let both = p.data().iter().zip(g.data()).filter(|(a, b)| **a && **b).count();
    let total = p.count() + g.count();
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

pub fn oracle_hd95(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (bp, bg) = (oracle_boundary(p), oracle_boundary(g));
    p95(&nearest(&bp, &bg)).max(p95(&nearest(&bg, &bp)))
}

pub fn oracle_hd95_pooled(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (bp, bg) = (oracle_boundary(p), oracle_boundary(g));
    let mut all = nearest(&bp, &bg);
    all.extend(nearest(&bg, &bp));
    p95(&all)
}

pub fn oracle_asd(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (bp, bg) = (oracle_boundary(p), oracle_boundary(g));
    let d: f64 = nearest(&bp, &bg).iter().chain(&nearest(&bg, &bp)).sum();
    d / (bp.len() + bg.len()) as f64
}

