//! Reverse-mode differentiation over coarse primitives.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the tape
//! in reverse and accumulates vector-Jacobian products. Every primitive here
//! is covered by a central finite-difference check in the test suite.

use crate::error::{Error, Result};
use crate::tensor::{fl, softmax_rows_masked, Scalar, Tensor};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBcast(usize, usize),
    MulRowBcast(usize, usize),
    SoftmaxRows { x: usize },
    LayerNormRows { x: usize, gamma: usize, beta: usize },
    Gelu(usize),
    Abs(usize),
    SumAll(usize),
    MeanRows(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize, len: usize },
    StrideRows { x: usize, stride: usize },
    L2NormalizeRows(usize),
    LogSumExpRows(usize),
    DiagToRow(usize),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter or anything that needs a gradient).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input; gradients stop here.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<F>, op: Op<F>) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).scale(c);
        self.unary(x, v, Op::Scale(x.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.unary(x, v, Op::Transpose(x.0))
    }

    pub fn add_row_bcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row_bcast(self.value(bias))?;
        Ok(self.binary(x, bias, v, Op::AddRowBcast(x.0, bias.0)))
    }

    pub fn mul_row_bcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.value(x).mul_row_bcast(self.value(row))?;
        Ok(self.binary(x, row, v, Op::MulRowBcast(x.0, row.0)))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let v = softmax_rows_masked(self.value(x), mask.as_deref().map(|m| m.as_slice()))?;
        Ok(self.unary(x, v, Op::SoftmaxRows { x: x.0 }))
    }

    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.shape() != (1, d) || b.shape() != (1, d) {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{}", d),
                got: format!("{:?}/{:?}", g.shape(), b.shape()),
                context: "layernorm scale/shift",
            });
        }
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let (mean, inv_std) = row_moments(xv.row(r));
            for c in 0..d {
                let xhat = (xv.get(r, c) - mean) * inv_std;
                out.set(r, c, xhat * g.get(0, c) + b.get(0, c));
            }
        }
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_fwd);
        self.unary(x, v, Op::Gelu(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.unary(x, v, Op::Abs(x.0))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::from_vec(1, 1, vec![self.value(x).sum()]).unwrap();
        self.unary(x, v, Op::SumAll(x.0))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_rows();
        self.unary(x, v, Op::MeanRows(x.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.binary(a, b, v, Op::ConcatCols(a.0, b.0)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        self.unary(x, v, Op::SliceCols { x: x.0, start, len })
    }

    pub fn stride_rows(&mut self, x: Var, stride: usize) -> Var {
        let v = self.value(x).stride_rows(stride);
        self.unary(x, v, Op::StrideRows { x: x.0, stride })
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let norm = row_norm(xv.row(r));
            if norm < fl(1e-12) {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            for c in 0..d {
                out.set(r, c, xv.get(r, c) / norm);
            }
        }
        Ok(self.unary(x, out, Op::L2NormalizeRows(x.0)))
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.check_finite("logsumexp input")?;
        let n = xv.rows();
        let mut out = Tensor::zeros(n, 1);
        for r in 0..n {
            let row = xv.row(r);
            let maxv = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&v| (v - maxv).exp()).sum();
            out.set(r, 0, maxv + s.ln());
        }
        Ok(self.unary(x, out, Op::LogSumExpRows(x.0)))
    }

    /// Diagonal of a square matrix as a 1×n row.
    pub fn diag_to_row(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if n != c {
            return Err(Error::ShapeMismatch {
                expected: "square matrix".into(),
                got: format!("{:?}", (n, c)),
                context: "diag_to_row",
            });
        }
        let data: Vec<F> = (0..n).map(|i| xv.get(i, i)).collect();
        let v = Tensor::row_vec(data);
        Ok(self.unary(x, v, Op::DiagToRow(x.0)))
    }

    /// Reverse pass from a 1×1 scalar node. Returns one optional gradient per
    /// tape node; leaves created with `constant` get `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<F>>>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                expected: "1x1 scalar".into(),
                got: format!("{:?}", lv.shape()),
                context: "backward seed",
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(1, 1, F::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        // constants never receive gradients
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(grads)
    }

    fn accumulate_parents(
        &self,
        id: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, t: Tensor<F>| -> Result<()> {
            if !self.nodes[i].needs_grad {
                return Ok(());
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&t)?,
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-F::one()))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b))?)?;
                acc(*b, g.mul(val(*a))?)?;
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c))?,
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(*b).transpose())?)?;
                acc(*b, val(*a).transpose().matmul(g)?)?;
            }
            Op::Transpose(x) => acc(*x, g.transpose())?,
            Op::AddRowBcast(x, bias) => {
                acc(*x, g.clone())?;
                acc(*bias, g.col_sums())?;
            }
            Op::MulRowBcast(x, row) => {
                acc(*x, g.mul_row_bcast(val(*row))?)?;
                acc(*row, g.mul(val(*x))?.col_sums())?;
            }
            Op::SoftmaxRows { x } => {
                // masked entries of y are exactly zero, so dx is exactly zero there
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot = dot + g.get(r, j) * y.get(r, j);
                    }
                    for j in 0..c {
                        dx.set(r, j, y.get(r, j) * (g.get(r, j) - dot));
                    }
                }
                acc(*x, dx)?;
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xv = val(*x);
                let gv = val(*gamma);
                let (n, d) = xv.shape();
                let inv_d = F::one() / fl(d as f64);
                let mut dx = Tensor::zeros(n, d);
                let mut dgamma = Tensor::zeros(1, d);
                let dbeta = g.col_sums();
                for r in 0..n {
                    let (mean, inv_std) = row_moments(xv.row(r));
                    let mut sum_gh = F::zero();
                    let mut sum_ghx = F::zero();
                    let mut xhat = vec![F::zero(); d];
                    let mut gh = vec![F::zero(); d];
                    for c in 0..d {
                        xhat[c] = (xv.get(r, c) - mean) * inv_std;
                        gh[c] = g.get(r, c) * gv.get(0, c);
                        sum_gh = sum_gh + gh[c];
                        sum_ghx = sum_ghx + gh[c] * xhat[c];
                        dgamma.set(0, c, dgamma.get(0, c) + g.get(r, c) * xhat[c]);
                    }
                    for c in 0..d {
                        let t = gh[c] - sum_gh * inv_d - xhat[c] * sum_ghx * inv_d;
                        dx.set(r, c, t * inv_std);
                    }
                }
                acc(*x, dx)?;
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::Gelu(x) => {
                let dx = val(*x).map(gelu_grad).mul(g)?;
                acc(*x, dx)?;
            }
            Op::Abs(x) => {
                let xv = val(*x);
                let dx = xv
                    .map(|a| {
                        if a > F::zero() {
                            F::one()
                        } else if a < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    })
                    .mul(g)?;
                acc(*x, dx)?;
            }
            Op::SumAll(x) => {
                let xv = val(*x);
                acc(*x, Tensor::filled(xv.rows(), xv.cols(), g.get(0, 0)))?;
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (n, d) = xv.shape();
                let inv_n = F::one() / fl(n as f64);
                let mut dx = Tensor::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        dx.set(r, c, g.get(0, c) * inv_n);
                    }
                }
                acc(*x, dx)?;
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                acc(*a, g.slice_cols(0, ca))?;
                acc(*b, g.slice_cols(ca, cb))?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = val(p).rows();
                    acc(p, g.slice_rows(start, r))?;
                    start += r;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                acc(*x, dx)?;
            }
            Op::StrideRows { x, stride } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, r) in (0..xv.rows()).step_by(*stride).enumerate() {
                    dx.row_mut(r).copy_from_slice(g.row(i));
                }
                acc(*x, dx)?;
            }
            Op::L2NormalizeRows(x) => {
                let xv = val(*x);
                let y = &node.value;
                let (n, d) = xv.shape();
                let mut dx = Tensor::zeros(n, d);
                for r in 0..n {
                    let norm = row_norm(xv.row(r));
                    let mut dot = F::zero();
                    for c in 0..d {
                        dot = dot + g.get(r, c) * y.get(r, c);
                    }
                    for c in 0..d {
                        dx.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norm);
                    }
                }
                acc(*x, dx)?;
            }
            Op::LogSumExpRows(x) => {
                let p = softmax_rows_masked(val(*x), None)?;
                let (n, c) = p.shape();
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        dx.set(r, j, p.get(r, j) * g.get(r, 0));
                    }
                }
                acc(*x, dx)?;
            }
            Op::DiagToRow(x) => {
                let n = val(*x).rows();
                let mut dx = Tensor::zeros(n, n);
                for i in 0..n {
                    dx.set(i, i, g.get(0, i));
                }
                acc(*x, dx)?;
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_moments<F: Scalar>(row: &[F]) -> (F, F) {
    let n = fl::<F>(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + fl(LN_EPS)).sqrt();
    (mean, inv_std)
}

fn row_norm<F: Scalar>(row: &[F]) -> F {
    row.iter().map(|&v| v * v).sum::<F>().sqrt()
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = fl::<F>(0.7978845608028654); // sqrt(2/pi)
    let k = fl::<F>(0.044715);
    let u = c * (x + k * x * x * x);
    fl::<F>(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = fl::<F>(0.7978845608028654);
    let k = fl::<F>(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    fl::<F>(0.5) * (F::one() + t)
        + fl::<F>(0.5) * x * sech2 * c * (F::one() + fl::<F>(3.0) * k * x * x)
}
