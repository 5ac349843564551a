//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order, so the tape is always in
//! topological order and `backward` is a single reverse sweep. Values are
//! addressed through copyable [`Var`] handles that are only meaningful for
//! the tape that issued them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SqDist(Var),
    CenterGram(Var),
    CenterCols(Var),
    Norm2(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations and replays them backwards.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Adds the vector `row` to every row of matrix `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(row))?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).numel() == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    /// Pairwise squared Euclidean distances between the rows of `a`.
    pub fn sq_dist(&mut self, a: Var) -> Result<Var> {
        let value = pairwise_sq_dists(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SqDist(a), rg))
    }

    /// `H K H` with `H = I - (1/n) 11^T`, for a square `K`.
    pub fn center_gram(&mut self, a: Var) -> Result<Var> {
        let value = double_center(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::CenterGram(a), rg))
    }

    /// Subtracts each column's mean.
    pub fn center_cols(&mut self, a: Var) -> Result<Var> {
        let value = center_columns(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::CenterCols(a), rg))
    }

    /// Euclidean norm of all entries. The subgradient at the origin is 0.
    pub fn norm2(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).norm());
        let rg = self.rg(&[a]);
        self.push(value, Op::Norm2(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&val(*b).transpose()?)?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, val(*a).transpose()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.nodes[row.0].requires_grad {
                    acc(*row, g.sum_rows()?.reshape(val(*row).shape())?);
                }
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))?),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, e| x * e)?),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)?),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)?),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))?),
            Op::Sum(a) => acc(*a, Tensor::filled(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, Tensor::filled(val(*a).shape(), g.data()[0] / n));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.nodes[p.0].requires_grad {
                        acc(*p, g.slice_cols(start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let (m, n) = src.require_matrix("slice backward")?;
                let w = g.cols();
                let mut out = Tensor::zeros(&[m, n]);
                let data = out.data_mut();
                for i in 0..m {
                    data[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, out);
            }
            Op::SelectRows(a, indices) => {
                let src = val(*a);
                let (m, n) = src.require_matrix("select backward")?;
                let mut out = Tensor::zeros(&[m, n]);
                let data = out.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, out);
            }
            Op::SqDist(a) => {
                let x = val(*a);
                let (n, p) = x.require_matrix("sq_dist backward")?;
                let gd = g.data();
                let xd = x.data();
                let mut out = vec![0.0; n * p];
                for i in 0..n {
                    for j in 0..n {
                        let w = 2.0 * (gd[i * n + j] + gd[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..p {
                            out[i * p + k] += w * (xd[i * p + k] - xd[j * p + k]);
                        }
                    }
                }
                acc(*a, Tensor::from_raw(vec![n, p], out));
            }
            Op::CenterGram(a) => acc(*a, double_center(g)?),
            Op::CenterCols(a) => acc(*a, center_columns(g)?),
            Op::Norm2(a) => {
                let norm = node.value.data()[0];
                let gs = g.data()[0];
                if norm > 0.0 {
                    acc(*a, val(*a).map(|x| gs * x / norm));
                } else {
                    acc(*a, Tensor::zeros(val(*a).shape()));
                }
            }
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn pairwise_sq_dists(x: &Tensor) -> Result<Tensor> {
    let (n, p) = x.require_matrix("sq_dist")?;
    let xd = x.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = 0.0;
            for k in 0..p {
                let diff = xd[i * p + k] - xd[j * p + k];
                d += diff * diff;
            }
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Ok(Tensor::from_raw(vec![n, n], out))
}

pub(crate) fn double_center(k: &Tensor) -> Result<Tensor> {
    let (n, m) = k.require_matrix("center_gram")?;
    if n != m {
        return Err(Error::Shape(format!("center_gram needs a square matrix, got {n}x{m}")));
    }
    let d = k.data();
    let nf = n as f64;
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row_mean[i] += d[i * n + j];
            col_mean[j] += d[i * n + j];
        }
    }
    let total: f64 = row_mean.iter().sum::<f64>() / (nf * nf);
    row_mean.iter_mut().for_each(|v| *v /= nf);
    col_mean.iter_mut().for_each(|v| *v /= nf);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = d[i * n + j] - row_mean[i] - col_mean[j] + total;
        }
    }
    Ok(Tensor::from_raw(vec![n, n], out))
}

pub(crate) fn center_columns(x: &Tensor) -> Result<Tensor> {
    let (n, p) = x.require_matrix("center_cols")?;
    if n == 0 {
        return Err(Error::Shape("center_cols of an empty matrix".into()));
    }
    let means = x.sum_rows()?.map(|s| s / n as f64);
    let neg = means.map(|m| -m);
    let out = x.add_row(&neg)?;
    debug_assert_eq!(out.shape(), &[n, p]);
    Ok(out)
}
