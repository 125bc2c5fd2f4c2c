//! Dense row-major matrices in f32 or f64, with the handful of kernels the
//! models need. No broadcasting beyond row-vector bias addition.

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar element type for all numeric code. Implemented for f32 and f64;
/// f64 is used by the gradient checks, f32 by training and inference.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an f64 literal into the generic scalar type.
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("literal conversion")
}

/// Row-major 2-D tensor. Vectors are 1×n.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}={}", rows, cols, rows * cols),
                got: format!("{} values", data.len()),
                context: "Tensor::from_vec",
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vec(data: Vec<F>) -> Self {
        let cols = data.len();
        Tensor { rows: 1, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// First flat index holding a NaN or infinity, if any.
    pub fn find_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.find_non_finite() {
            Some(index) => Err(Error::NonFinite {
                index,
                context: context.to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(other, "Tensor::zip")?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
                context,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "Tensor::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// self (n×k) · other (k×m).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("inner dim {}", self.cols),
                got: format!("{} rows", other.rows),
                context: "Tensor::matmul",
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in arow.iter().enumerate() {
                if a == F::zero() {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Broadcast-add a 1×cols row vector to every row.
    pub fn add_row_bcast(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{}", self.cols),
                got: format!("{:?}", bias.shape()),
                context: "Tensor::add_row_bcast",
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Ok(out)
    }

    /// Broadcast-multiply every row by a 1×cols row vector.
    pub fn mul_row_bcast(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{}", self.cols),
                got: format!("{:?}", row.shape()),
                context: "Tensor::mul_row_bcast",
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, &s) in out.row_mut(r).iter_mut().zip(&row.data) {
                *v = *v * s;
            }
        }
        Ok(out)
    }

    /// Column sums, returned as a 1×cols row vector.
    pub fn col_sums(&self) -> Self {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        out
    }

    /// Mean over rows, 1×cols.
    pub fn mean_rows(&self) -> Self {
        self.col_sums().scale(F::one() / fl(self.rows as f64))
    }

    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", self.rows),
                got: format!("{} rows", other.rows),
                context: "Tensor::concat_cols",
            });
        }
        let cols = self.cols + other.cols;
        let mut out = Tensor::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.row_mut(r)[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map(|p| p.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} cols", cols),
                    got: format!("{} cols", p.cols),
                    context: "Tensor::concat_rows",
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let mut out = Tensor::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Tensor {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Every `stride`-th row, starting at row 0.
    pub fn stride_rows(&self, stride: usize) -> Self {
        let rows = self.rows.div_ceil(stride);
        let mut out = Tensor::zeros(rows, self.cols);
        for (i, r) in (0..self.rows).step_by(stride).enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f32().unwrap()).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }
}

/// Numerically stable row softmax with optional boolean mask (true = keep).
/// Masked entries come out exactly zero.
pub fn softmax_rows_masked<F: Scalar>(x: &Tensor<F>, mask: Option<&[bool]>) -> Result<Tensor<F>> {
    x.check_finite("softmax input")?;
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} mask entries", x.len()),
                got: format!("{}", m.len()),
                context: "softmax mask",
            });
        }
    }
    let (n, c) = x.shape();
    let mut out = Tensor::zeros(n, c);
    for r in 0..n {
        let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
        let mut maxv = F::neg_infinity();
        for j in 0..c {
            if keep(j) {
                maxv = maxv.max(x.get(r, j));
            }
        }
        if maxv == F::neg_infinity() {
            return Err(Error::FullyMaskedRow(r));
        }
        let mut sum = F::zero();
        for j in 0..c {
            if keep(j) {
                let e = (x.get(r, j) - maxv).exp();
                out.set(r, j, e);
                sum = sum + e;
            }
        }
        for j in 0..c {
            if keep(j) {
                out.set(r, j, out.get(r, j) / sum);
            }
        }
    }
    Ok(out)
}

/// Row softmax over a dense matrix, rejecting non-finite input with the
/// offending flat index.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    softmax_rows_masked(x, None)
}
