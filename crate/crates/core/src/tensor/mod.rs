//! Dense row-major `f64` tensors, a define-by-run autodiff tape and the
//! finite-difference gradient oracle.

mod gemm;
pub mod gradcheck;
mod tape;

pub use gemm::gemm;
pub use gradcheck::{finite_diff_check, finite_diff_check_many, finite_diff_errors, relative_error};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Norm floor below which a slice is treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Dense n-dimensional array of `f64` values in row-major order.
///
/// A tensor is a plain value: it carries no gradient state. Differentiable
/// computation happens on a [`Tape`], which owns copies of the values it
/// records.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Axis selector for the 2-D reductions used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row is one slice (reduce across columns).
    Rows,
    /// Each column is one slice (reduce across rows, i.e. the batch).
    Cols,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Samples entries uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples entries from a standard normal distribution.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Extents of a matrix; 1-D tensors read as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(Error::Contract(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Plain matrix product without tape recording.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-column mean and biased variance of a matrix.
pub fn column_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (r, c) = x.dims2()?;
    Ok(tape::column_moments(x.data(), r, c))
}

/// Sequential dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax_rows received NaN".into()));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Tensor::new(vec![r, c], out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Result of [`l2_normalize`]: the normalized tensor plus the indices of
/// slices whose norm fell below [`NORM_EPS`] and were left unchanged.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub tensor: Tensor,
    pub degenerate: Vec<usize>,
}

/// Scales every slice along `axis` to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor, axis: Axis) -> Result<Normalized> {
    let (r, c) = x.dims2()?;
    let norms = slice_norms(&x.data, r, c, axis);
    let mut data = x.data.clone();
    let mut degenerate = Vec::new();
    for (s, &n) in norms.iter().enumerate() {
        if n < NORM_EPS {
            degenerate.push(s);
        }
    }
    for i in 0..r {
        for j in 0..c {
            let n = match axis {
                Axis::Rows => norms[i],
                Axis::Cols => norms[j],
            };
            if n >= NORM_EPS {
                data[i * c + j] /= n;
            }
        }
    }
    Ok(Normalized {
        tensor: Tensor {
            shape: x.shape.clone(),
            data,
        },
        degenerate,
    })
}

pub(crate) fn slice_norms(data: &[f64], r: usize, c: usize, axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Rows => data.chunks(c).map(|row| dot(row, row).sqrt()).collect(),
        Axis::Cols => {
            let mut acc = vec![0.0; c];
            for row in data.chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v * v;
                }
            }
            debug_assert_eq!(data.len(), r * c);
            acc.into_iter().map(f64::sqrt).collect()
        }
    }
}
