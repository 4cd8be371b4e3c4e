//! Dense row-major f32 tensors and the handful of kernels the engine needs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Elementwise operation for [`map_zip`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZipOp {
    Add,
    Mul,
}

/// Right-hand operand of [`map_zip`]: another tensor of the same shape or a scalar.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f32),
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim("dims2", other, &[0, 0])),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = *self.shape.last().expect("rank >= 1");
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    /// Stack equal-length rows into a rank-2 tensor.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Tensor> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", &[cols], &[bad.len()]));
        }
        Tensor::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
///
/// Each output cell is accumulated in ascending `k` order in f64 and rounded
/// once, so the result is bit-reproducible.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (p, &av) in arow.iter().enumerate() {
                acc += av as f64 * b.data[p * n + j] as f64;
            }
            *o = acc as f32;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `x · wᵀ` for a weight stored as `[out, in]`.
///
/// Same accumulation order as [`matmul`] against the transposed weight, but
/// reads both operands contiguously.
pub fn matmul_t(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, k) = x.dims2()?;
    let (n, k2) = w.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul_t", x.shape(), w.shape()));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let xrow = &x.data[i * k..(i + 1) * k];
        for j in 0..n {
            let wrow = &w.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(xrow, wrow);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Dot product accumulated left to right in f64, rounded once.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    dot_wide(a, b) as f32
}

/// [`dot`] without the final rounding.
pub fn dot_wide(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..m {
        softmax_in_place(&mut out.data[i * n..(i + 1) * n]);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Elementwise combination of `a` with a same-shape tensor or a scalar.
///
/// `ZipOp::Mul` with a scalar operand is scaling.
pub fn map_zip(a: &Tensor, b: Operand<'_>, op: ZipOp) -> Result<Tensor> {
    let f: fn(f32, f32) -> f32 = match op {
        ZipOp::Add => |x: f32, y: f32| x + y,
        ZipOp::Mul => |x: f32, y: f32| x * y,
    };
    let data = match b {
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(Error::dim("map_zip", &a.shape, &b.shape));
            }
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        }
        Operand::Scalar(s) => a.data.iter().map(|&x| f(x, s)).collect(),
    };
    Tensor::from_vec(&a.shape, data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    map_zip(a, Operand::Tensor(b), ZipOp::Add)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    map_zip(a, Operand::Tensor(b), ZipOp::Mul)
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    map_zip(a, Operand::Scalar(s), ZipOp::Mul).expect("scalar operand never mismatches")
}

/// Index of the maximum of a slice; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Usage("argmax over an empty axis".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Argmax over the final axis of the last row.
pub fn argmax_last(x: &Tensor) -> Result<usize> {
    let n = *x.shape().last().expect("tensor has rank >= 1");
    argmax(&x.data[x.len() - n..])
}
