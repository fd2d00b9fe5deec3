//! Dense row-major `f64` tensors of rank 1 to 4.
//!
//! Rank-4 tensors are read as `(N, C, H, W)`. Values are immutable once a
//! tensor is placed on a [`Graph`](crate::autograd::Graph); gradients live on
//! the graph, not on the tensor.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} hold {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Panicking constructor for shapes known to be valid at the call site.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert!(check_dims(&dims).is_ok(), "invalid dims {dims:?}");
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        check_dims(dims).expect("invalid tensor dims");
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.sample(StandardNormal))
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.gen_range(low..high))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank 4 (N, C, H, W), got dims {:?}", self.dims),
            )),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = self.nchw().expect("rank-4 tensor");
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "dot of mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "diff of mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug assertion for the all-finite invariant; compiled out in release.
    pub fn debug_assert_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "non-finite value in {what}");
    }

    /// One `(C, H, W)` slab of a rank-4 tensor as a rank-4 tensor with `N = 1`.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let (nn, c, h, w) = self.nchw()?;
        if n >= nn {
            return Err(Error::shape(
                "batch_item",
                format!("index {n} out of range for batch {nn}"),
            ));
        }
        let len = c * h * w;
        Ok(Tensor::from_parts(
            vec![1, c, h, w],
            self.data[n * len..(n + 1) * len].to_vec(),
        ))
    }

    /// Stacks rank-4 tensors with `N = 1`-compatible item shapes along N.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let (_, c, h, w) = first.nchw()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.nchw()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(
                    "stack",
                    format!("item (C, H, W) = ({tc}, {th}, {tw}) differs from ({c}, {h}, {w})"),
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(vec![n, c, h, w], data))
    }

    /// CSV debug dump: header `dims=N,C,H,W`, then one value per line.
    pub fn to_csv(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let mut out = format!("dims={}\n", dims.join(","));
        for v in &self.data {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Tensor> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("dims="))
            .ok_or_else(|| Error::invalid("tensor csv", "missing `dims=` header"))?;
        let dims = header
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid("tensor csv", format!("bad dims: {e}")))?;
        let data = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid("tensor csv", format!("bad value: {e}")))?;
        Tensor::new(&dims, data)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank {} outside 1..={MAX_RANK}", dims.len()),
        ));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("dimension {i} is zero")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_bad_rank() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = Tensor::new(&[1, 2, 1, 2], vec![0.1, -3.5e-17, 1.0 / 3.0, 7.0]).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("dims=1,2,1,2\n"));
        assert_eq!(Tensor::from_csv(&csv).unwrap(), t);
    }

    #[test]
    fn stack_and_batch_item_are_inverse() {
        let a = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 2, 2, 2], |i| -(i as f64));
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2, 2]);
        assert_eq!(s.batch_item(1).unwrap(), b);
        assert!(s.batch_item(2).is_err());
    }
}
