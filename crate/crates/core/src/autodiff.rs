//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation is evaluated eagerly and appended to a [`Tape`]. The
//! backward pass is expressed in terms of the same recorded operations, so
//! a gradient obtained with `create_graph = true` is itself a node on the
//! tape and can be differentiated again. This is what makes penalties on
//! input gradients (double backprop) trainable.
//!
//! All values are `f64`. Reductions such as [`Tape::logsumexp`] and
//! [`Tape::l2norm`] act on the last axis.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("shape {shape:?} holds {expected} values but the buffer has {actual}")]
    BufferLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("node {0} is not a differentiable leaf")]
    NotALeaf(usize),
    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major `f64` tensor. A shape of `[]` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(AutodiffError::BufferLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Size of the leading axis (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Picks leading-axis entries by index, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let n = self.rows();
        let mut data = Vec::with_capacity(indices.len() * self.row_len());
        for &i in indices {
            if i >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Stacks tensors along the leading axis. All trailing shapes must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(AutodiffError::InvalidShape {
            op: "concat_rows",
            shape: Vec::new(),
            reason: "nothing to concatenate",
        })?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `[batch, channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.in_h, self.in_w]
    }

    fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Which operand of the convolution contraction a conv node produces.
///
/// The three roles are the partial derivatives of one trilinear form
/// `sum y[b,o,i,j] * w[o,c,p,q] * x[b,c,i*s+p-pad,j*s+q-pad]`, so the
/// vector-Jacobian product of each role is expressed with the other two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvRole {
    /// `conv(x, w) -> y`
    Output,
    /// `conv_input_grad(w, y) -> x`
    Input,
    /// `conv_weight_grad(x, y) -> w`
    Weight,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    InvOrZero(Var),
    SumAll(Var),
    SumLast(Var),
    ExpandLast(Var, usize),
    BroadcastLeading(Var, Vec<usize>),
    SumLeading(Var, Vec<usize>),
    LogSumExp(Var),
    L2Norm(Var),
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>, usize),
    Reshape(Var, Vec<usize>),
    Conv(ConvRole, Var, Var, ConvGeom),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::InvOrZero(..) => "inv_or_zero",
            Op::SumAll(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::ExpandLast(..) => "expand_last",
            Op::BroadcastLeading(..) => "broadcast",
            Op::SumLeading(..) => "sum_leading",
            Op::LogSumExp(..) => "logsumexp",
            Op::L2Norm(..) => "l2norm",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
            Op::Reshape(..) => "reshape",
            Op::Conv(ConvRole::Output, ..) => "conv2d",
            Op::Conv(ConvRole::Input, ..) => "conv2d_input_grad",
            Op::Conv(ConvRole::Weight, ..) => "conv2d_weight_grad",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Conv(_, a, b, _) => vec![a, b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::InvOrZero(a)
            | Op::SumAll(a)
            | Op::SumLast(a)
            | Op::ExpandLast(a, _)
            | Op::LogSumExp(a)
            | Op::L2Norm(a) => vec![a],
            Op::BroadcastLeading(a, _)
            | Op::SumLeading(a, _)
            | Op::Gather(a, _)
            | Op::Scatter(a, _, _)
            | Op::Reshape(a, _) => vec![a],
        }
    }
}

/// Per-leaf gradients returned by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    entries: Vec<GradEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct GradEntry {
    leaf: Var,
    value: Tensor,
    node: Option<Var>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.leaf == leaf).map(|e| &e.value)
    }

    /// The on-tape gradient node, present only for `create_graph` passes.
    pub fn node(&self, leaf: Var) -> Option<Var> {
        self.entries.iter().find(|e| e.leaf == leaf).and_then(|e| e.node)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|e| e.leaf)
    }

    /// Gradients in the order the leaves were requested.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|e| e.value).collect()
    }
}

/// Single-writer record of evaluated operations in topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(mismatch(op, a, b));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

fn last_axis(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape.last() {
        Some(&k) if k > 0 => Ok((a.data.len() / k, k)),
        _ => Err(AutodiffError::InvalidShape {
            op,
            shape: a.shape.clone(),
            reason: "needs a non-empty last axis",
        }),
    }
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(AutodiffError::InvalidShape {
            op,
            shape: a.shape.clone(),
            reason: "expected a 2-D tensor",
        }),
    }
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn conv_contract(geom: &ConvGeom, role: ConvRole, a: &[f64], b: &[f64]) -> Vec<f64> {
    let g = geom;
    let out_len = match role {
        ConvRole::Output => g.output_shape().iter().product(),
        ConvRole::Input => g.input_shape().iter().product(),
        ConvRole::Weight => g.weight_shape().iter().product(),
    };
    let mut out = vec![0.0; out_len];
    for bi in 0..g.batch {
        for o in 0..g.out_channels {
            for i in 0..g.out_h {
                for j in 0..g.out_w {
                    let yi = ((bi * g.out_channels + o) * g.out_h + i) * g.out_w + j;
                    for c in 0..g.in_channels {
                        for p in 0..g.kernel_h {
                            let h = (i * g.stride + p) as isize - g.padding as isize;
                            if h < 0 || h >= g.in_h as isize {
                                continue;
                            }
                            for q in 0..g.kernel_w {
                                let w = (j * g.stride + q) as isize - g.padding as isize;
                                if w < 0 || w >= g.in_w as isize {
                                    continue;
                                }
                                let xi = ((bi * g.in_channels + c) * g.in_h + h as usize) * g.in_w
                                    + w as usize;
                                let wi = ((o * g.in_channels + c) * g.kernel_h + p) * g.kernel_w + q;
                                match role {
                                    ConvRole::Output => out[yi] += b[wi] * a[xi],
                                    ConvRole::Input => out[xi] += a[wi] * b[yi],
                                    ConvRole::Weight => out[wi] += a[xi] * b[yi],
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Evaluates one operation given the values of all earlier nodes.
fn evaluate(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let val = |v: &Var| -> Result<&Tensor> { values.get(v.0).ok_or(AutodiffError::UnknownNode(v.0)) };
    let name = op.name();
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => zip_same(name, val(a)?, val(b)?, |x, y| x + y),
        Op::Sub(a, b) => zip_same(name, val(a)?, val(b)?, |x, y| x - y),
        Op::Mul(a, b) => zip_same(name, val(a)?, val(b)?, |x, y| x * y),
        Op::Div(a, b) => zip_same(name, val(a)?, val(b)?, |x, y| x / y),
        Op::Scale(a, c) => Ok(val(a)?.map(|x| x * c)),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            let (m, k) = require_matrix(name, a)?;
            let (k2, n) = require_matrix(name, b)?;
            if k != k2 {
                return Err(mismatch(name, a, b));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)
        }
        Op::Transpose(a) => {
            let a = val(a)?;
            let (m, n) = require_matrix(name, a)?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)
        }
        Op::Relu(a) => Ok(val(a)?.map(|x| if x > 0.0 { x } else { 0.0 })),
        Op::Exp(a) => Ok(val(a)?.map(f64::exp)),
        Op::Log(a) => Ok(val(a)?.map(f64::ln)),
        Op::Square(a) => Ok(val(a)?.map(|x| x * x)),
        Op::Sqrt(a) => Ok(val(a)?.map(f64::sqrt)),
        Op::InvOrZero(a) => Ok(val(a)?.map(|x| if x == 0.0 { 0.0 } else { 1.0 / x })),
        Op::SumAll(a) => Ok(Tensor::scalar(val(a)?.data.iter().sum())),
        Op::SumLast(a) => {
            let a = val(a)?;
            let (_, k) = last_axis(name, a)?;
            let data = a.data.chunks(k).map(|r| r.iter().sum()).collect();
            Tensor::new(a.shape[..a.shape.len() - 1].to_vec(), data)
        }
        Op::ExpandLast(a, k) => {
            let a = val(a)?;
            let mut shape = a.shape.clone();
            shape.push(*k);
            let data = a.data.iter().flat_map(|&v| std::iter::repeat_n(v, *k)).collect();
            Tensor::new(shape, data)
        }
        Op::BroadcastLeading(a, shape) => {
            let a = val(a)?;
            if !shape.ends_with(&a.shape) {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            let reps = shape.iter().product::<usize>() / a.data.len().max(1);
            let mut data = Vec::with_capacity(reps * a.data.len());
            for _ in 0..reps {
                data.extend_from_slice(&a.data);
            }
            Tensor::new(shape.clone(), data)
        }
        Op::SumLeading(a, shape) => {
            let a = val(a)?;
            if !a.shape.ends_with(shape) {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            let w = shape.iter().product::<usize>();
            let mut out = vec![0.0; w];
            if w > 0 {
                for chunk in a.data.chunks(w) {
                    for (o, &v) in out.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            Tensor::new(shape.clone(), out)
        }
        Op::LogSumExp(a) => {
            let a = val(a)?;
            let (_, k) = last_axis(name, a)?;
            let data = a.data.chunks(k).map(logsumexp_row).collect();
            Tensor::new(a.shape[..a.shape.len() - 1].to_vec(), data)
        }
        Op::L2Norm(a) => {
            let a = val(a)?;
            let (_, k) = last_axis(name, a)?;
            let data = a
                .data
                .chunks(k)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor::new(a.shape[..a.shape.len() - 1].to_vec(), data)
        }
        Op::Gather(a, idx) => {
            let a = val(a)?;
            let (rows, k) = require_matrix(name, a)?;
            if idx.len() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let data = idx
                .iter()
                .enumerate()
                .map(|(r, &c)| {
                    if c < k {
                        Ok(a.data[r * k + c])
                    } else {
                        Err(AutodiffError::IndexOutOfRange {
                            op: name,
                            index: c,
                            len: k,
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::new(vec![rows], data)
        }
        Op::Scatter(a, idx, k) => {
            let a = val(a)?;
            if a.shape.len() != 1 || a.shape[0] != idx.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let mut out = vec![0.0; idx.len() * k];
            for (r, &c) in idx.iter().enumerate() {
                if c >= *k {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: name,
                        index: c,
                        len: *k,
                    });
                }
                out[r * k + c] = a.data[r];
            }
            Tensor::new(vec![idx.len(), *k], out)
        }
        Op::Reshape(a, shape) => {
            let a = val(a)?;
            if shape.iter().product::<usize>() != a.data.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            Tensor::new(shape.clone(), a.data.clone())
        }
        Op::Conv(role, a, b, geom) => {
            let (a, b) = (val(a)?, val(b)?);
            let (sa, sb, so) = match role {
                ConvRole::Output => (geom.input_shape(), geom.weight_shape(), geom.output_shape()),
                ConvRole::Input => (geom.weight_shape(), geom.output_shape(), geom.input_shape()),
                ConvRole::Weight => (geom.input_shape(), geom.output_shape(), geom.weight_shape()),
            };
            if a.shape != sa {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: sa,
                });
            }
            if b.shape != sb {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: b.shape.clone(),
                    rhs: sb,
                });
            }
            Tensor::new(so, conv_contract(geom, *role, &a.data, &b.data))
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = evaluate(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    fn push_value(&mut self, op: Op, value: Tensor) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_value(Op::Leaf, value)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_value(Op::Constant, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    /// Elementwise `1/x`, with `0` mapped to `0`.
    pub fn inv_or_zero(&mut self, a: Var) -> Result<Var> {
        self.push(Op::InvOrZero(a))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::InvalidShape {
                op: "mean",
                shape: self.shape(a).to_vec(),
                reason: "mean of an empty tensor",
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumLast(a))
    }

    /// Repeats every element `k` times along a new trailing axis.
    pub fn expand_last(&mut self, a: Var, k: usize) -> Result<Var> {
        self.push(Op::ExpandLast(a, k))
    }

    /// Tiles `a` along new leading axes; `a`'s shape must be a suffix of `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::BroadcastLeading(a, shape.to_vec()))
    }

    /// Adjoint of [`Tape::broadcast`]: sums leading axes down to `shape`.
    pub fn sum_leading(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::SumLeading(a, shape.to_vec()))
    }

    /// `log(sum(exp(a)))` over the last axis, computed with max subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExp(a))
    }

    /// Euclidean norm over the last axis.
    ///
    /// The derivative at the zero vector is taken to be zero.
    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2Norm(a))
    }

    /// Picks `a[r, indices[r]]` from a `[rows, k]` matrix.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.push(Op::Gather(a, indices.to_vec()))
    }

    /// Adjoint of [`Tape::gather`].
    pub fn scatter(&mut self, a: Var, indices: &[usize], k: usize) -> Result<Var> {
        self.push(Op::Scatter(a, indices.to_vec(), k))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[batch, in_channels, in_h, in_w], &[out_channels, wc, kernel_h, kernel_w]) = (&xs[..], &ws[..])
        else {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        };
        if wc != in_channels || stride == 0 || in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = ConvGeom {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel_h) / stride + 1,
            out_w: (in_w + 2 * padding - kernel_w) / stride + 1,
        };
        self.push(Op::Conv(ConvRole::Output, x, w, geom))
    }

    /// Recomputes every non-leaf value from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (op, cached) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Leaf | Op::Constant => cached.clone(),
                _ => evaluate(op, &values)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Vector-Jacobian products of node `node` for upstream gradient `g`,
    /// one entry per parent (in parent order), recorded on the tape.
    fn vjp(&mut self, node: usize, g: Var, needed: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.ops[node].clone();
        let out = Var(node);
        let parents = op.parents();
        let need = |i: usize| needed[parents[i].0];
        let mut grads = vec![None; parents.len()];
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(_, _) => {
                grads[0] = Some(g);
                grads[1] = Some(g);
            }
            Op::Sub(_, _) => {
                grads[0] = Some(g);
                if need(1) {
                    grads[1] = Some(self.neg(g)?);
                }
            }
            Op::Mul(a, b) => {
                if need(0) {
                    grads[0] = Some(self.mul(g, b)?);
                }
                if need(1) {
                    grads[1] = Some(self.mul(g, a)?);
                }
            }
            Op::Div(_, b) => {
                if need(0) {
                    grads[0] = Some(self.div(g, b)?);
                }
                if need(1) {
                    let go = self.mul(g, out)?;
                    let q = self.div(go, b)?;
                    grads[1] = Some(self.neg(q)?);
                }
            }
            Op::Scale(_, c) => grads[0] = Some(self.scale(g, c)?),
            Op::MatMul(a, b) => {
                if need(0) {
                    let bt = self.transpose(b)?;
                    grads[0] = Some(self.matmul(g, bt)?);
                }
                if need(1) {
                    let at = self.transpose(a)?;
                    grads[1] = Some(self.matmul(at, g)?);
                }
            }
            Op::Transpose(_) => grads[0] = Some(self.transpose(g)?),
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                grads[0] = Some(self.mul(g, m)?);
            }
            Op::Exp(_) => grads[0] = Some(self.mul(g, out)?),
            Op::Log(a) => grads[0] = Some(self.div(g, a)?),
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0)?;
                grads[0] = Some(self.mul(g, two_a)?);
            }
            Op::Sqrt(_) => {
                let two_out = self.scale(out, 2.0)?;
                grads[0] = Some(self.div(g, two_out)?);
            }
            Op::InvOrZero(_) => {
                let sq = self.square(out)?;
                let t = self.mul(g, sq)?;
                grads[0] = Some(self.neg(t)?);
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                grads[0] = Some(self.broadcast(g, &shape)?);
            }
            Op::SumLast(a) => {
                let k = *self.shape(a).last().unwrap_or(&1);
                grads[0] = Some(self.expand_last(g, k)?);
            }
            Op::ExpandLast(..) => grads[0] = Some(self.sum_last(g)?),
            Op::BroadcastLeading(a, _) => {
                let shape = self.shape(a).to_vec();
                grads[0] = Some(self.sum_leading(g, &shape)?);
            }
            Op::SumLeading(a, _) => {
                let shape = self.shape(a).to_vec();
                grads[0] = Some(self.broadcast(g, &shape)?);
            }
            Op::LogSumExp(a) => {
                let k = *self.shape(a).last().unwrap_or(&1);
                let out_e = self.expand_last(out, k)?;
                let shifted = self.sub(a, out_e)?;
                let probs = self.exp(shifted)?;
                let g_e = self.expand_last(g, k)?;
                grads[0] = Some(self.mul(g_e, probs)?);
            }
            Op::L2Norm(a) => {
                let k = *self.shape(a).last().unwrap_or(&1);
                let inv = self.inv_or_zero(out)?;
                let s = self.mul(g, inv)?;
                let s_e = self.expand_last(s, k)?;
                grads[0] = Some(self.mul(a, s_e)?);
            }
            Op::Gather(a, idx) => {
                let k = self.shape(a)[1];
                grads[0] = Some(self.scatter(g, &idx, k)?);
            }
            Op::Scatter(_, idx, _) => grads[0] = Some(self.gather(g, &idx)?),
            Op::Reshape(a, _) => {
                let shape = self.shape(a).to_vec();
                grads[0] = Some(self.reshape(g, &shape)?);
            }
            Op::Conv(role, a, b, geom) => {
                let (ra, rb) = match role {
                    // y = conv(x, w): dx = input(w, g), dw = weight(x, g)
                    ConvRole::Output => ((ConvRole::Input, b, g), (ConvRole::Weight, a, g)),
                    // x = input(w, y): dw = weight(g, y), dy = conv(g, w)
                    ConvRole::Input => ((ConvRole::Weight, g, b), (ConvRole::Output, g, a)),
                    // w = weight(x, y): dx = input(g, y), dy = conv(x, g)
                    ConvRole::Weight => ((ConvRole::Input, g, b), (ConvRole::Output, a, g)),
                };
                if need(0) {
                    grads[0] = Some(self.push(Op::Conv(ra.0, ra.1, ra.2, geom))?);
                }
                if need(1) {
                    grads[1] = Some(self.push(Op::Conv(rb.0, rb.1, rb.2, geom))?);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of the scalar `output` with respect to the leaves `wrt`.
    ///
    /// With `create_graph` the backward computation stays on the tape and
    /// [`GradientMap::node`] exposes each gradient for further
    /// differentiation; otherwise the tape is restored to its prior length.
    pub fn backward(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<GradientMap> {
        let n = self.ops.len();
        if output.0 >= n {
            return Err(AutodiffError::UnknownNode(output.0));
        }
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let mut leaves: Vec<Var> = Vec::with_capacity(wrt.len());
        for &w in wrt {
            if w.0 >= n {
                return Err(AutodiffError::UnknownNode(w.0));
            }
            if self.ops[w.0] != Op::Leaf {
                return Err(AutodiffError::NotALeaf(w.0));
            }
            if !leaves.contains(&w) {
                leaves.push(w);
            }
        }

        let mark = n;
        let mut needed = vec![false; n];
        for &w in &leaves {
            needed[w.0] = true;
        }
        for i in 0..=output.0 {
            if !needed[i] && self.ops[i].parents().iter().any(|p| needed[p.0]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        if needed[output.0] {
            let seed = Tensor::ones(self.shape(output).to_vec());
            grads[output.0] = Some(self.constant(seed));
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] || matches!(self.ops[i], Op::Leaf | Op::Constant) {
                continue;
            }
            let parents = self.ops[i].parents();
            let contribs = self.vjp(i, g, &needed)?;
            for (p, c) in parents.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !needed[p.0] {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }

        let mut entries = Vec::with_capacity(leaves.len());
        for &leaf in &leaves {
            let grad = grads.get(leaf.0).copied().flatten();
            let value = match grad {
                Some(g) => self.value(g).clone(),
                None => Tensor::zeros(self.shape(leaf).to_vec()),
            };
            let node = if create_graph {
                Some(match grad {
                    Some(g) => g,
                    None => self.constant(value.clone()),
                })
            } else {
                None
            };
            entries.push(GradEntry { leaf, value, node });
        }
        if !create_graph {
            self.ops.truncate(mark);
            self.values.truncate(mark);
        }
        Ok(GradientMap { entries })
    }

    /// `||d energy / d input||_2` as a differentiable scalar.
    ///
    /// `energy` must be a scalar; the input gradient is flattened first.
    pub fn grad_l2norm_of_grad(&mut self, energy: Var, input: Var) -> Result<Var> {
        let grads = self.backward(energy, &[input], true)?;
        let g = grads.node(input).expect("create_graph always yields nodes");
        let n = self.value(g).len();
        let flat = self.reshape(g, &[n])?;
        self.l2norm(flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn logsumexp_of_uniform_pair_is_ln2() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x).unwrap();
        assert_eq!(t.value(y).item().unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn logsumexp_large_values_do_not_overflow() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1000.0, 1000.0]));
        let y = t.logsumexp(x).unwrap();
        assert!(close(t.value(y).item().unwrap(), 1000.0 + std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.5]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![2.0, 0.25, -4.0]).unwrap();
        let mut expected = [0.0; 2];
        for (i, e) in expected.iter_mut().enumerate() {
            for k in 0..3 {
                *e += a.data()[i * 3 + k] * b.data()[k];
            }
        }
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a), t.leaf(b));
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c).data(), &expected);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::InvalidShape { op: "matmul", .. })));
    }

    #[test]
    fn derivative_of_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x).unwrap();
        let g = t.backward(y, &[x], false).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let x2 = t.square(x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let g = t.backward(x3, &[x], true).unwrap();
        let dx = g.node(x).unwrap();
        assert_eq!(t.value(dx).item(), Some(12.0));
        let gg = t.backward(dx, &[x], false).unwrap();
        assert_eq!(gg.get(x).unwrap().item(), Some(12.0));
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.square(c).unwrap();
        let g = t.backward(y, &[x], false).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.square(x).unwrap();
        assert!(matches!(t.backward(y, &[x], false), Err(AutodiffError::NonScalarOutput(_))));
        let s = t.sum(y).unwrap();
        assert!(matches!(t.backward(s, &[Var(99)], false), Err(AutodiffError::UnknownNode(99))));
        assert!(matches!(t.backward(s, &[y], false), Err(AutodiffError::NotALeaf(_))));
    }

    #[test]
    fn backward_without_graph_restores_tape() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let y = t.square(x).unwrap();
        let s = t.sum(y).unwrap();
        let before = t.len();
        let g1 = t.backward(s, &[x, x], false).unwrap();
        assert_eq!(t.len(), before);
        assert_eq!(g1.len(), 1);
        let g2 = t.backward(s, &[x], false).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn grad_norm_of_linear_energy() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let x = t.leaf(Tensor::new(vec![1, 2], vec![-7.0, 0.3]).unwrap());
        let e = t.matmul(x, w).unwrap();
        let e = t.sum(e).unwrap();
        let n = t.grad_l2norm_of_grad(e, x).unwrap();
        assert!(close(t.value(n).item().unwrap(), 5.0, 1e-15));
    }

    #[test]
    fn grad_norm_of_half_squared_norm() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 2.0]));
        let sq = t.square(x).unwrap();
        let s = t.sum(sq).unwrap();
        let e = t.scale(s, 0.5).unwrap();
        let n = t.grad_l2norm_of_grad(e, x).unwrap();
        assert!(close(t.value(n).item().unwrap(), 3.0, 1e-15));
    }

    #[test]
    fn l2norm_at_zero_has_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let n = t.l2norm(x).unwrap();
        let g = t.backward(n, &[x], false).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.7, 2.3, 1.1, 0.0, -3.0]).unwrap());
        let w = t.leaf(Tensor::new(vec![3, 2], vec![0.3, 0.2, -0.1, 0.5, 0.9, -0.4]).unwrap());
        let h = t.matmul(x, w).unwrap();
        let h = t.relu(h).unwrap();
        let l = t.logsumexp(h).unwrap();
        let s = t.sum(l).unwrap();
        t.grad_l2norm_of_grad(s, x).unwrap();
        let replayed = t.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)), "node {i}");
        }
    }

    #[test]
    fn tensor_buffer_length_is_checked() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(AutodiffError::BufferLength { expected: 4, actual: 3, .. })
        ));
    }
}
