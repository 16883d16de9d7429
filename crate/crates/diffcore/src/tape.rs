//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its backward rule. Nodes are only ever appended, so
//! the node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

use std::fmt;

use crate::error::{contract, DiffError, Result};
use crate::linalg::gemm;
use crate::tensor::{broadcast_shape, expand_to, reduce_to_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined operation whose forward value is computed by the caller.
///
/// `backward` receives the input values, the output value and the incoming
/// gradient, and returns one optional gradient per input.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Tanh,
    Atanh,
    Exp,
    Log,
    Sqrt,
    Acosh,
    Square,
    ClampMin(f64),
    ClampMax(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Minimum(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv1d { x: Var, w: Var, batch: usize, kernel: usize, stride: usize },
    Upsample { x: Var, factor: usize },
    NormRows(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather { x: Var, index: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SmoothL1(Var, Var),
    StraightThrough { grad_to: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq_lens: Vec<usize>, heads: usize, probs: Vec<f64> },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::Minimum(..) => "minimum",
            Op::MatMul { .. } => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Upsample { .. } => "upsample",
            Op::NormRows(_) => "norm_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::SmoothL1(..) => "smooth_l1",
            Op::StraightThrough { .. } => "straight_through",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "causal_attention",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = match kind {
            Unary::Neg => xv.map(|a| -a),
            Unary::Scale(s) => xv.map(|a| a * s),
            Unary::AddScalar(s) => xv.map(|a| a + s),
            Unary::Relu => xv.map(|a| a.max(0.0)),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Atanh => xv.map(f64::atanh),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => xv.map(f64::ln),
            Unary::Sqrt => xv.map(f64::sqrt),
            Unary::Acosh => xv.map(f64::acosh),
            Unary::Square => xv.map(|a| a * a),
            Unary::ClampMin(c) => xv.map(|a| a.max(c)),
            Unary::ClampMax(c) => xv.map(|a| a.min(c)),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), x)
    }
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(s), x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn atanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Atanh, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    /// Inverse hyperbolic cosine. The backward rule returns zero at and
    /// below the domain boundary `x <= 1`, where the derivative is unbounded.
    pub fn acosh(&mut self, x: Var) -> Var {
        self.unary(Unary::Acosh, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::ClampMin(c), x)
    }
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::ClampMax(c), x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = if av.shape() == bv.shape() {
            av.zip_map(bv, f)
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| DiffError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })?;
            expand_to(av, &shape).zip_map(&expand_to(bv, &shape), f)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// Elementwise minimum of two same-shape tensors. At ties the gradient
    /// is split evenly between both operands.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("minimum", av, bv)?;
        let out = av.zip_map(bv, f64::min);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Minimum(a, b), rg))
    }

    /// `a @ b` for `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `[n, k] x [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(mismatch());
        }
        let (n, k) = (av.shape()[0], av.shape()[1]);
        let (bk, m) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(mismatch());
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Zero-padded 1-D convolution over time.
    ///
    /// `x` holds `batch` sequences stacked along rows as `[batch * T, C_in]`;
    /// `w` is laid out as `[kernel * C_in, C_out]` (tap-major). Padding is
    /// `kernel / 2` on both sides, so stride 1 keeps `T` and stride 2 halves
    /// an even `T` for odd kernels.
    pub fn conv1d(&mut self, x: Var, w: Var, batch: usize, kernel: usize, stride: usize) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let mismatch = || DiffError::ShapeMismatch {
            op: "conv1d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        if xv.rank() != 2 || wv.rank() != 2 || batch == 0 || kernel == 0 || stride == 0 {
            return Err(mismatch());
        }
        let (rows, cin) = (xv.shape()[0], xv.shape()[1]);
        if rows % batch != 0 || wv.shape()[0] != kernel * cin {
            return Err(mismatch());
        }
        let t_in = rows / batch;
        let t_out = conv_out_len(t_in, kernel, stride);
        if t_out == 0 {
            return Err(mismatch());
        }
        let cout = wv.shape()[1];
        let patches = im2col(xv.data(), batch, t_in, cin, kernel, stride, t_out);
        let mut out = vec![0.0; batch * t_out * cout];
        gemm(batch * t_out, kernel * cin, cout, &patches, false, wv.data(), false, &mut out, 0.0);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![batch * t_out, cout], out)?,
            Op::Conv1d {
                x,
                w,
                batch,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling along time: every row is repeated
    /// `factor` times, which upsamples each stacked sequence independently.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || factor == 0 {
            return Err(contract("upsample", format!("cannot upsample {:?} by {factor}", xv.shape())));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len() * factor);
        for r in 0..xv.rows() {
            for _ in 0..factor {
                out.extend_from_slice(xv.row(r));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![xv.rows() * factor, c], out)?,
            Op::Upsample { x, factor },
            rg,
        ))
    }

    /// Euclidean norm of every row: `[n, m] -> [n, 1]`.
    pub fn norm_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(contract("norm_rows", format!("expected a matrix, got {:?}", xv.shape())));
        }
        let out: Vec<f64> = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![xv.rows(), 1], out)?, Op::NormRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.sum() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(contract("sum_axis", format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let c = *xv.shape().last().unwrap();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let c = *xv.shape().last().unwrap();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    /// Picks elements by flat index into a tensor of shape `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(contract("gather", format!("index {bad} out of range for {} elements", xv.len())));
        }
        let out: Vec<f64> = index.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Sorts a vector in descending order. The ordering is computed from the
    /// forward values and treated as fixed: `sorted[i]` receives gradient
    /// from, and passes it to, source index `perm[i]`. Ties keep index order.
    pub fn sort_desc(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let xv = &self.nodes[x.0].value;
        let mut perm: Vec<usize> = (0..xv.len()).collect();
        let d = xv.data();
        perm.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
        let shape = xv.shape().to_vec();
        let v = self.gather(x, perm.clone(), shape)?;
        Ok((v, perm))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(contract("gather_rows", format!("row {bad} out of range for {:?}", xv.shape())));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.nodes[x.0].value.rows();
        if start >= end || end > rows {
            return Err(contract("slice_rows", format!("range {start}..{end} for {rows} rows")));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || start >= end || end > xv.shape()[1] {
            return Err(contract("slice_cols", format!("range {start}..{end} for {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::new(vec![xv.rows(), end - start], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract("concat_rows", "no inputs"))?;
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for v in xs {
            let t = &self.nodes[v.0].value;
            if t.shape()[1..] != tail[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[first.0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract("concat_cols", "no inputs"))?;
        let rows = self.nodes[first.0].value.rows();
        let mut total = 0;
        for v in xs {
            let t = &self.nodes[v.0].value;
            if t.rank() != 2 || t.rows() != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[first.0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.shape()[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                out.extend_from_slice(self.nodes[v.0].value.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean smooth-L1 (Huber with unit threshold) between two same-shape tensors.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("smooth_l1", av, bv)?;
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| {
                let d = (x - y).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        let value = Tensor::scalar(total / av.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::SmoothL1(a, b), rg))
    }

    /// Same forward value, no backward contribution.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// Forward value of `value_from`, with the incoming gradient routed to
    /// `grad_to` as the identity. `value_from` itself receives nothing.
    pub fn straight_through(&mut self, value_from: Var, grad_to: Var) -> Result<Var> {
        let (fv, gv) = (&self.nodes[value_from.0].value, &self.nodes[grad_to.0].value);
        same_shape("straight_through", fv, gv)?;
        let value = fv.clone();
        let rg = self.rg(&[grad_to]);
        Ok(self.push(value, Op::StraightThrough { grad_to }, rg))
    }

    /// Row-wise layer normalization with learned gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let d = xv.cols();
        if xv.rank() != 2 || gv.len() != d || bv.len() != d {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, a) in row.iter().enumerate() {
                let h = (a - mu) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over sequences stacked along rows.
    ///
    /// `q`, `k`, `v` are `[sum(seq_lens), d]` with `d` divisible by `heads`.
    /// Position `i` of a sequence attends to positions `0..=i` of the same
    /// sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_lens: &[usize], heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        same_shape("causal_attention", qv, kv)?;
        same_shape("causal_attention", qv, vv)?;
        let total: usize = seq_lens.iter().sum();
        let d = qv.cols();
        if qv.rank() != 2 || qv.rows() != total || heads == 0 || d % heads != 0 {
            return Err(contract(
                "causal_attention",
                format!("{:?} with sequences {seq_lens:?} and {heads} heads", qv.shape()),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; total * d];
        let mut probs = Vec::with_capacity(seq_lens.iter().map(|t| heads * t * t).sum());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut start = 0;
        for &t in seq_lens {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..t {
                    let qi = &qd[(start + i) * d + col..(start + i) * d + col + dh];
                    let mut row = vec![f64::NEG_INFINITY; t];
                    for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(start + j) * d + col..(start + j) * d + col + dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut row);
                    let o = &mut out[(start + i) * d + col..(start + i) * d + col + dh];
                    for (j, &p) in row.iter().enumerate().take(i + 1) {
                        let vj = &vd[(start + j) * d + col..(start + j) * d + col + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
            start += t;
        }
        let value = Tensor::new(vec![total, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                seq_lens: seq_lens.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Records a caller-computed forward value whose gradient is given by `op`.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(contract("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g);
            grads[i] = Some(g);
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    gv.shape(),
                    self.nodes[v.0].value.shape(),
                    "gradient shape from {}",
                    node.op.name()
                );
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Unary(kind, x) => {
                let xv = val(*x);
                let gx = match *kind {
                    Unary::Neg => g.map(|a| -a),
                    Unary::Scale(s) => g.map(|a| a * s),
                    Unary::AddScalar(_) => g.clone(),
                    Unary::Relu => g.zip_map(xv, |gg, a| if a > 0.0 { gg } else { 0.0 }),
                    Unary::Tanh => g.zip_map(y, |gg, t| gg * (1.0 - t * t)),
                    Unary::Atanh => g.zip_map(xv, |gg, a| gg / (1.0 - a * a)),
                    Unary::Exp => g.zip_map(y, |gg, e| gg * e),
                    Unary::Log => g.zip_map(xv, |gg, a| gg / a),
                    Unary::Sqrt => g.zip_map(y, |gg, s| gg / (2.0 * s)),
                    Unary::Acosh => g.zip_map(xv, |gg, a| {
                        let d = a * a - 1.0;
                        if d > 0.0 {
                            gg / d.sqrt()
                        } else {
                            0.0
                        }
                    }),
                    Unary::Square => g.zip_map(xv, |gg, a| 2.0 * a * gg),
                    Unary::ClampMin(c) => g.zip_map(xv, |gg, a| if a > c { gg } else { 0.0 }),
                    Unary::ClampMax(c) => g.zip_map(xv, |gg, a| if a < c { gg } else { 0.0 }),
                };
                vec![(*x, gx)]
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let shape = y.shape();
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|x| -x)),
                    Binary::Mul => (
                        g.zip_map(&expand_to(bv, shape), |gg, x| gg * x),
                        g.zip_map(&expand_to(av, shape), |gg, x| gg * x),
                    ),
                    Binary::Div => {
                        let ae = expand_to(av, shape);
                        let be = expand_to(bv, shape);
                        let ga = g.zip_map(&be, |gg, x| gg / x);
                        let mut gb = g.zip_map(&ae, |gg, x| -gg * x);
                        for (o, x) in gb.data_mut().iter_mut().zip(be.data()) {
                            *o /= x * x;
                        }
                        (ga, gb)
                    }
                };
                vec![(*a, reduce_to_shape(&ga, av.shape())), (*b, reduce_to_shape(&gb, bv.shape()))]
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..g.len() {
                    let (x, z) = (av.data()[i], bv.data()[i]);
                    if x < z {
                        gb.data_mut()[i] = 0.0;
                    } else if z < x {
                        ga.data_mut()[i] = 0.0;
                    } else {
                        ga.data_mut()[i] *= 0.5;
                        gb.data_mut()[i] *= 0.5;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k) = (av.shape()[0], av.shape()[1]);
                let m = y.shape()[1];
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; bv.len()];
                if *trans_b {
                    // C = A B^T, B is [m, k]
                    gemm(n, m, k, g.data(), false, bv.data(), false, &mut ga, 0.0);
                    gemm(m, n, k, g.data(), true, av.data(), false, &mut gb, 0.0);
                } else {
                    gemm(n, m, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                    gemm(k, n, m, av.data(), true, g.data(), false, &mut gb, 0.0);
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga).unwrap()),
                    (*b, Tensor::new(bv.shape().to_vec(), gb).unwrap()),
                ]
            }
            Op::Conv1d {
                x,
                w,
                batch,
                kernel,
                stride,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let cin = xv.cols();
                let cout = wv.shape()[1];
                let t_in = xv.rows() / batch;
                let t_out = conv_out_len(t_in, *kernel, *stride);
                let rows = batch * t_out;
                let kc = kernel * cin;
                let mut out = Vec::with_capacity(2);
                if self.nodes[w.0].requires_grad {
                    let patches = im2col(xv.data(), *batch, t_in, cin, *kernel, *stride, t_out);
                    let mut gw = vec![0.0; kc * cout];
                    gemm(kc, rows, cout, &patches, true, g.data(), false, &mut gw, 0.0);
                    out.push((*w, Tensor::new(wv.shape().to_vec(), gw).unwrap()));
                }
                if self.nodes[x.0].requires_grad {
                    let mut gp = vec![0.0; rows * kc];
                    gemm(rows, cout, kc, g.data(), false, wv.data(), true, &mut gp, 0.0);
                    let gx = col2im(&gp, *batch, t_in, cin, *kernel, *stride, t_out);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), gx).unwrap()));
                }
                out
            }
            Op::Upsample { x, factor } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let dst = gx.row_mut(r);
                    for f in 0..*factor {
                        let src = &g.data()[(r * factor + f) * c..(r * factor + f + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::NormRows(x) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let n = y.data()[r];
                    if n > 0.0 {
                        let gr = g.data()[r] / n;
                        for (d, a) in gx.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *d = gr * a;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let xv = val(*x);
                vec![(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64))]
            }
            Op::SumAxis(x) => vec![(*x, expand_to(g, val(*x).shape()))],
            Op::SoftmaxRows(x) => {
                let c = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (a, b) in gr.iter_mut().zip(yr) {
                        *a = b * (*a - s);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmaxRows(x) => {
                let c = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    for (a, b) in gr.iter_mut().zip(yr) {
                        *a -= b.exp() * s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (gg, &i) in g.data().iter().zip(index) {
                    gx.data_mut()[i] += gg;
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let c = gx.cols();
                for (r, &i) in index.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (d, s) in gx.row_mut(i).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SliceCols { x, start } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                vec![(*x, gx)]
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|v| {
                        let t = val(*v);
                        let part = g.data()[offset..offset + t.len()].to_vec();
                        offset += t.len();
                        (*v, Tensor::new(t.shape().to_vec(), part).unwrap())
                    })
                    .collect()
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|v| {
                        let t = val(*v);
                        let w = t.cols();
                        let mut part = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        (*v, Tensor::new(t.shape().to_vec(), part).unwrap())
                    })
                    .collect()
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshaped(val(*x).shape().to_vec()).unwrap())],
            Op::SmoothL1(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = g.item() / av.len() as f64;
                let ga = av.zip_map(bv, |x, z| {
                    let d = x - z;
                    scale * if d.abs() < 1.0 { d } else { d.signum() }
                });
                let gb = ga.map(|v| -v);
                vec![(*a, ga), (*b, gb)]
            }
            Op::StraightThrough { grad_to } => vec![(*grad_to, g.clone())],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = val(*x);
                let gv = val(*gamma);
                let d = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..xv.rows() {
                    let gr = g.row(r);
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx).unwrap()),
                    (*gamma, Tensor::new(gv.shape().to_vec(), gg).unwrap()),
                    (*beta, Tensor::new(val(*beta).shape().to_vec(), gbeta).unwrap()),
                ]
            }
            Op::Attention {
                q,
                k,
                v,
                seq_lens,
                heads,
                probs,
            } => attention_backward(val(*q), val(*k), val(*v), g, seq_lens, *heads, probs)
                .into_iter()
                .zip([*q, *k, *v])
                .map(|(t, var)| (var, t))
                .collect(),
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                op.backward(&ins, y, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(t, v)| t.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn conv_out_len(t_in: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (t_in + 2 * pad).checked_sub(kernel).map_or(0, |v| v / stride + 1)
}

fn im2col(x: &[f64], batch: usize, t_in: usize, cin: usize, kernel: usize, stride: usize, t_out: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let kc = kernel * cin;
    let mut p = vec![0.0; batch * t_out * kc];
    for b in 0..batch {
        for t in 0..t_out {
            let dst = &mut p[(b * t_out + t) * kc..(b * t_out + t + 1) * kc];
            for k in 0..kernel {
                let src_t = (t * stride + k) as isize - pad as isize;
                if src_t >= 0 && (src_t as usize) < t_in {
                    let src = (b * t_in + src_t as usize) * cin;
                    dst[k * cin..(k + 1) * cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    p
}

fn col2im(p: &[f64], batch: usize, t_in: usize, cin: usize, kernel: usize, stride: usize, t_out: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let kc = kernel * cin;
    let mut x = vec![0.0; batch * t_in * cin];
    for b in 0..batch {
        for t in 0..t_out {
            let src = &p[(b * t_out + t) * kc..(b * t_out + t + 1) * kc];
            for k in 0..kernel {
                let dst_t = (t * stride + k) as isize - pad as isize;
                if dst_t >= 0 && (dst_t as usize) < t_in {
                    let dst = (b * t_in + dst_t as usize) * cin;
                    for (d, s) in x[dst..dst + cin].iter_mut().zip(&src[k * cin..(k + 1) * cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    seq_lens: &[usize],
    heads: usize,
    probs: &[f64],
) -> [Tensor; 3] {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut start = 0;
    let mut p_off = 0;
    for &t in seq_lens {
        for h in 0..heads {
            let col = h * dh;
            let at = |r: usize| (start + r) * d + col;
            for i in 0..t {
                let p = &probs[p_off..p_off + t];
                p_off += t;
                let go = &gd[at(i)..at(i) + dh];
                // dP_ij = dO_i . V_j ; dS = P * (dP - sum_j P dP)
                let mut dp = vec![0.0; i + 1];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    *dpj = dot(go, &vd[at(j)..at(j) + dh]);
                    for (gvv, goo) in gv[at(j)..at(j) + dh].iter_mut().zip(go) {
                        *gvv += p[j] * goo;
                    }
                }
                let s: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        gq[at(i) + c] += ds * kd[at(j) + c];
                        gk[at(j) + c] += ds * qd[at(i) + c];
                    }
                }
            }
        }
        start += t;
    }
    [
        Tensor::new(q.shape().to_vec(), gq).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
        Tensor::new(v.shape().to_vec(), gv).unwrap(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn trivial_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let one = tape.constant(Tensor::scalar(1.0));
        let th = tape.tanh(z);
        let ac = tape.acosh(one);
        assert_eq!(tape.value(th).item(), 0.0);
        assert_eq!(tape.value(ac).item(), 0.0);
        let a = tape.constant(t(&[2, 2], &[1., -2., 3., 0.5]));
        let s = tape.smooth_l1(a, a).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_only_its_branch() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2.0, -1.5]));
        let y = tape.param(Tensor::from_vec(vec![0.25, 4.0]));
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.value(sx), tape.value(x));
        let p = tape.mul(sx, y).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(y).unwrap().data(), &[2.0, -1.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::Contract { op: "backward", .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = tape.param(Tensor::zeros(&[3, 2]));
        assert!(err.to_string().contains("matmul"));
        assert!(matches!(tape.add(a, c), Err(DiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let mut tape = Tape::new();
        let f = tape.param(t(&[1, 3], &[0.1, 0.2, 0.3]));
        let fd = tape.param(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let st = tape.straight_through(fd, f).unwrap();
        assert!(tape.value(st).bit_eq(tape.value(fd)));
        let l = tape.sum(st);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(f).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.get(fd).is_none());
    }

    #[test]
    fn sort_desc_routes_through_permutation() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.2, 0.9, 0.5, 0.9]));
        let (s, perm) = tape.sort_desc(x).unwrap();
        assert_eq!(perm, vec![1, 3, 2, 0]);
        assert_eq!(tape.value(s).data(), &[0.9, 0.9, 0.5, 0.2]);
        let w = tape.constant(Tensor::from_vec(vec![1.0, 10.0, 100.0, 1000.0]));
        let p = tape.mul(s, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1000.0, 1.0, 100.0, 10.0]);
    }

    #[test]
    fn conv_lengths() {
        assert_eq!(conv_out_len(64, 3, 2), 32);
        assert_eq!(conv_out_len(32, 3, 1), 32);
        assert_eq!(conv_out_len(16, 3, 2), 8);
    }

    #[test]
    fn attention_is_causal() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 5.0, 5.0]));
        let a = tape.causal_attention(x, x, x, &[3], 1).unwrap();
        // first position sees only itself
        assert_eq!(tape.value(a).row(0), &[1.0, 0.0]);
        // changing the last row must not affect earlier outputs
        let mut tape2 = Tape::new();
        let x2 = tape2.param(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -7.0, 2.0]));
        let a2 = tape2.causal_attention(x2, x2, x2, &[3], 1).unwrap();
        assert_eq!(tape.value(a).row(1), tape2.value(a2).row(1));
    }
}
