//! Dense fp64 tensors with a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse once and leaves gradients on
//! every node; parameter gradients are then folded into a [`ParamStore`] and
//! applied with [`Sgd`].
//!
//! Shapes are row-major. Sequence activations are `[positions x channels]`
//! matrices, per-channel statistics are `[channels]` vectors and losses are
//! scalars (shape `[]`).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of the tensor viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, kept in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients recorded on `graph` into the parameters selected by `keep`.
    pub fn accumulate(&mut self, graph: &Graph, keep: impl Fn(ParamId) -> bool) -> Result<()> {
        for (id, grad) in graph.param_grads()? {
            if keep(id) {
                self.tensors[id.0].accumulate_grad(grad);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub min_learning_rate: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            decay_factor: 0.1,
            min_learning_rate: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if !(self.min_learning_rate > 0.0 && self.min_learning_rate <= self.learning_rate) {
            return Err(Error::Config(format!(
                "min_learning_rate must lie in (0, learning_rate], got {}",
                self.min_learning_rate
            )));
        }
        Ok(())
    }
}

/// Plain SGD with a multiplicative step-down schedule.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    lr: f64,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            lr: config.learning_rate,
            config,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Multiplies the rate by the decay factor, never going below the floor.
    pub fn decay(&mut self) {
        self.lr = (self.lr * self.config.decay_factor).max(self.config.min_learning_rate);
    }

    /// `p <- p - lr * grad(p)` for every parameter carrying a gradient, then clears grads.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in store.names.iter().zip(&store.tensors) {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("gradient of {name}"),
                    });
                }
            }
        }
        for t in &mut store.tensors {
            if let Some(g) = t.grad.take() {
                t.data
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(p, g)| *p -= self.lr * g);
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum RowKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Row(RowKind, Var, Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, pad_left: usize },
    Softmax(Var),
    LogSoftmax(Var),
    MeanRows(Var),
    StdRows { x: Var, eps: f64 },
    Softplus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Glu(Var),
    Embed { table: Var, ids: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    PadRows { x: Var, left: usize },
    AvgPool { x: Var, k: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Build the forward pass through its methods, call
/// [`Graph::backward`] once on a scalar, then read gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
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

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a node's value into a fresh leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Leaf for a learnable parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let mut value = store.get(id).clone();
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
            grad: None,
        };
        self.push(name, value, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| f(*x)).collect(),
            grad: None,
        };
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map("scale", a, |x| x * k, Op::Scale(a, k))
    }

    fn row_op(&mut self, name: &'static str, kind: RowKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        if ta.shape.len() != 2 || tb.numel() != cols {
            return Err(shape_err(name, ta, tb));
        }
        if let RowKind::Div = kind {
            if tb.data.contains(&0.0) {
                return Err(Error::NonFinite { op: name.into() });
            }
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(&tb.data) {
                *x = match kind {
                    RowKind::Add => *x + y,
                    RowKind::Sub => *x - y,
                    RowKind::Mul => *x * y,
                    RowKind::Div => *x / y,
                };
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
            grad: None,
        };
        self.push(name, value, Op::Row(kind, a, b))
    }

    /// Adds a `[cols]` vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("add_row", RowKind::Add, a, b)
    }

    pub fn sub_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("sub_row", RowKind::Sub, a, b)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("mul_row", RowKind::Mul, a, b)
    }

    pub fn div_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("div_row", RowKind::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in ta.data[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
            grad: None,
        };
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// `a @ b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul_bt", ta)?;
        let (n, k2) = require_matrix("matmul_bt", tb)?;
        if k != k2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
            grad: None,
        };
        self.push("matmul_bt", value, Op::MatMulBT(a, b))
    }

    /// 1-D convolution over positions, stride 1.
    ///
    /// `x: [m x c_in]`, `w: [(k * c_in) x c_out]` laid out tap-major, `b: [c_out]`.
    /// The input is zero padded with `pad_left` / `pad_right` rows, giving
    /// `m + pad_left + pad_right - k + 1` output positions.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (m, cin) = require_matrix("conv1d", tx)?;
        let (kc, cout) = require_matrix("conv1d", tw)?;
        if cin == 0 || kc % cin != 0 || tb.numel() != cout {
            return Err(shape_err("conv1d", tx, tw));
        }
        let k = kc / cin;
        let padded_len = m + pad_left + pad_right;
        if padded_len < k {
            return Err(shape_err("conv1d", tx, tw));
        }
        let out_len = padded_len - k + 1;
        let mut padded = vec![0.0; padded_len * cin];
        padded[pad_left * cin..(pad_left + m) * cin].copy_from_slice(&tx.data);
        let mut out = Vec::with_capacity(out_len * cout);
        for t in 0..out_len {
            out.extend_from_slice(&tb.data);
            let orow = &mut out[t * cout..(t + 1) * cout];
            let window = &padded[t * cin..(t + k) * cin];
            for (r, &v) in window.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let wrow = &tw.data[r * cout..(r + 1) * cout];
                orow.iter_mut().zip(wrow).for_each(|(o, w)| *o += v * w);
            }
        }
        let value = Tensor {
            shape: vec![out_len, cout],
            data: out,
            grad: None,
        };
        self.push("conv1d", value, Op::Conv1d { x, w, b, pad_left })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
            grad: None,
        };
        self.push("softmax", value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
            grad: None,
        };
        self.push("log_softmax", value, Op::LogSoftmax(a))
    }

    /// Per-channel mean over the positions of a `[m x d]` matrix.
    pub fn mean_over_positions(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, d) = require_matrix("mean_over_positions", ta)?;
        if m == 0 {
            return Err(Error::Data("mean_over_positions: no positions".into()));
        }
        let value = Tensor::vector(column_means(&ta.data, m, d));
        self.push("mean_over_positions", value, Op::MeanRows(a))
    }

    /// Per-channel population standard deviation over positions, floored at `eps`.
    pub fn std_over_positions(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (m, d) = require_matrix("std_over_positions", ta)?;
        if m == 0 {
            return Err(Error::Data("std_over_positions: no positions".into()));
        }
        let sd = column_stds(&ta.data, m, d);
        let value = Tensor::vector(sd.into_iter().map(|s| s.max(eps)).collect());
        self.push("std_over_positions", value, Op::StdRows { x: a, eps })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// Gated linear unit: splits the columns in half and returns `a * sigmoid(b)`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, c) = require_matrix("glu", ta)?;
        if c % 2 != 0 {
            return Err(shape_err("glu", ta, ta));
        }
        let h = c / 2;
        let mut data = Vec::with_capacity(m * h);
        for row in ta.data.chunks(c) {
            let (lin, gate) = row.split_at(h);
            data.extend(lin.iter().zip(gate).map(|(x, g)| x * sigmoid(*g)));
        }
        let value = Tensor {
            shape: vec![m, h],
            data,
            grad: None,
        };
        self.push("glu", value, Op::Glu(a))
    }

    /// Looks up rows of `table: [V x d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = require_matrix("embed", tt)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "embed",
                lhs: tt.shape.clone(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
            grad: None,
        };
        self.push(
            "embed",
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Picks `x[r, idx[r]]` from every row, giving a `[rows]` vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, c) = require_matrix("gather", tx)?;
        if idx.len() != m || idx.iter().any(|&i| i >= c) {
            return Err(Error::Shape {
                op: "gather",
                lhs: tx.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| tx.data[r * c + i])
            .collect();
        self.push(
            "gather",
            Tensor::vector(data),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Concatenates along the last axis. Vectors are treated as one row.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let vector_out = first.shape.len() <= 1;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || (t.shape.len() <= 1) != vector_out {
                return Err(shape_err("concat", first, t));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if vector_out {
            vec![total]
        } else {
            vec![rows, total]
        };
        let value = Tensor {
            shape,
            data,
            grad: None,
        };
        self.push("concat", value, Op::ConcatCols(parts.to_vec()))
    }

    /// Adds zero rows above and below a matrix.
    pub fn pad(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = require_matrix("pad", tx)?;
        let mut data = vec![0.0; (m + left + right) * d];
        data[left * d..(left + m) * d].copy_from_slice(&tx.data);
        let value = Tensor {
            shape: vec![m + left + right, d],
            data,
            grad: None,
        };
        self.push("pad", value, Op::PadRows { x, left })
    }

    /// Length-preserving average pooling over a centred window of odd size `k`,
    /// averaging only positions inside the sequence.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = require_matrix("avg_pool", tx)?;
        let half = k / 2;
        let mut data = vec![0.0; m * d];
        for t in 0..m {
            let (lo, hi) = (t.saturating_sub(half), (t + half + 1).min(m));
            let n = (hi - lo) as f64;
            let orow = &mut data[t * d..(t + 1) * d];
            for s in lo..hi {
                orow.iter_mut()
                    .zip(&tx.data[s * d..(s + 1) * d])
                    .for_each(|(o, v)| *o += v);
            }
            orow.iter_mut().for_each(|o| *o /= n);
        }
        let value = Tensor {
            shape: vec![m, d],
            data,
            grad: None,
        };
        self.push("avg_pool", value, Op::AvgPool { x, k })
    }

    /// Length-preserving max pooling over a centred window of odd size `k`.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = require_matrix("max_pool", tx)?;
        let half = k / 2;
        let mut data = vec![0.0; m * d];
        let mut argmax = vec![0; m * d];
        for t in 0..m {
            let (lo, hi) = (t.saturating_sub(half), (t + half + 1).min(m));
            for c in 0..d {
                let mut best = lo * d + c;
                for s in lo + 1..hi {
                    if tx.data[s * d + c] > tx.data[best] {
                        best = s * d + c;
                    }
                }
                data[t * d + c] = tx.data[best];
                argmax[t * d + c] = best;
            }
        }
        let value = Tensor {
            shape: vec![m, d],
            data,
            grad: None,
        };
        self.push("max_pool", value, Op::MaxPool { x, argmax })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Data("mean of an empty tensor".into()));
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    /// Columns `start..start + len` of a matrix (or elements of a vector).
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: tx.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data[r * cols + start..r * cols + start + len]);
        }
        let shape = if tx.shape.len() <= 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        let value = Tensor {
            shape,
            data,
            grad: None,
        };
        self.push("slice_cols", value, Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: tx.shape.clone(),
                rhs: shape,
            });
        }
        let value = Tensor {
            shape,
            data: tx.data.clone(),
            grad: None,
        };
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Reverse sweep from a scalar. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Autodiff(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.len(), |d| axpy(d, g, 1.0));
                add_into(&mut grads[b.0], g.len(), |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g.len(), |d| axpy(d, g, 1.0));
                add_into(&mut grads[b.0], g.len(), |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&val(*a).data, &val(*b).data);
                add_into(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut().zip(g).zip(tb).for_each(|((d, g), y)| *d += g * y)
                });
                add_into(&mut grads[b.0], g.len(), |d| {
                    d.iter_mut().zip(g).zip(ta).for_each(|((d, g), x)| *d += g * x)
                });
            }
            Op::Scale(a, k) => add_into(&mut grads[a.0], g.len(), |d| axpy(d, g, *k)),
            Op::Row(kind, a, b) => {
                let (ta, tb) = (&val(*a).data, &val(*b).data);
                let cols = tb.len();
                add_into(&mut grads[a.0], g.len(), |d| {
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            drow[c] += match kind {
                                RowKind::Add | RowKind::Sub => grow[c],
                                RowKind::Mul => grow[c] * tb[c],
                                RowKind::Div => grow[c] / tb[c],
                            };
                        }
                    }
                });
                add_into(&mut grads[b.0], cols, |d| {
                    for (grow, arow) in g.chunks(cols).zip(ta.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += match kind {
                                RowKind::Add => grow[c],
                                RowKind::Sub => -grow[c],
                                RowKind::Mul => grow[c] * arow[c],
                                RowKind::Div => -grow[c] * arow[c] / (tb[c] * tb[c]),
                            };
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = dC B^T
                add_into(&mut grads[a.0], m * k, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            d[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                // dB = A^T dC
                add_into(&mut grads[b.0], k * n, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av != 0.0 {
                                axpy(&mut d[p * n..(p + 1) * n], grow, av);
                            }
                        }
                    }
                });
            }
            Op::MatMulBT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                // dA = dC B
                add_into(&mut grads[a.0], m * k, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                axpy(&mut d[i * k..(i + 1) * k], &tb.data[j * k..(j + 1) * k], gv);
                            }
                        }
                    }
                });
                // dB = dC^T A
                add_into(&mut grads[b.0], n * k, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                axpy(&mut d[j * k..(j + 1) * k], &ta.data[i * k..(i + 1) * k], gv);
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, pad_left } => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, cin) = (tx.shape[0], tx.shape[1]);
                let cout = tw.shape[1];
                let k = tw.shape[0] / cin;
                let out_len = out.shape[0];
                let padded_len = out_len + k - 1;
                let mut padded = vec![0.0; padded_len * cin];
                padded[pad_left * cin..(pad_left + m) * cin].copy_from_slice(&tx.data);
                add_into(&mut grads[b.0], cout, |d| {
                    for grow in g.chunks(cout) {
                        axpy(d, grow, 1.0);
                    }
                });
                add_into(&mut grads[w.0], tw.numel(), |d| {
                    for t in 0..out_len {
                        let grow = &g[t * cout..(t + 1) * cout];
                        let window = &padded[t * cin..(t + k) * cin];
                        for (r, &v) in window.iter().enumerate() {
                            if v != 0.0 {
                                axpy(&mut d[r * cout..(r + 1) * cout], grow, v);
                            }
                        }
                    }
                });
                let mut dpad = vec![0.0; padded_len * cin];
                for t in 0..out_len {
                    let grow = &g[t * cout..(t + 1) * cout];
                    let dwin = &mut dpad[t * cin..(t + k) * cin];
                    for (r, dv) in dwin.iter_mut().enumerate() {
                        *dv += dot(&tw.data[r * cout..(r + 1) * cout], grow);
                    }
                }
                add_into(&mut grads[x.0], m * cin, |d| {
                    axpy(d, &dpad[pad_left * cin..(pad_left + m) * cin], 1.0)
                });
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                add_into(&mut grads[a.0], g.len(), |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data.chunks(cols))
                    {
                        let s = dot(grow, yrow);
                        for c in 0..cols {
                            drow[c] += yrow[c] * (grow[c] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                add_into(&mut grads[a.0], g.len(), |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data.chunks(cols))
                    {
                        let s: f64 = grow.iter().sum();
                        for c in 0..cols {
                            drow[c] += grow[c] - yrow[c].exp() * s;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let (m, dcols) = (ta.shape[0], ta.shape[1]);
                add_into(&mut grads[a.0], m * dcols, |d| {
                    for drow in d.chunks_mut(dcols) {
                        axpy(drow, g, 1.0 / m as f64);
                    }
                });
            }
            Op::StdRows { x, eps } => {
                let tx = val(*x);
                let (m, dcols) = (tx.shape[0], tx.shape[1]);
                let mu = column_means(&tx.data, m, dcols);
                let sd = column_stds(&tx.data, m, dcols);
                add_into(&mut grads[x.0], m * dcols, |d| {
                    for (drow, xrow) in d.chunks_mut(dcols).zip(tx.data.chunks(dcols)) {
                        for c in 0..dcols {
                            if sd[c] > *eps {
                                drow[c] += g[c] * (xrow[c] - mu[c]) / (m as f64 * sd[c]);
                            }
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let ta = &val(*a).data;
                add_into(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(ta)
                        .for_each(|((d, g), x)| *d += g * sigmoid(*x))
                });
            }
            Op::Tanh(a) => add_into(&mut grads[a.0], g.len(), |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(&out.data)
                    .for_each(|((d, g), y)| *d += g * (1.0 - y * y))
            }),
            Op::Sigmoid(a) => add_into(&mut grads[a.0], g.len(), |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(&out.data)
                    .for_each(|((d, g), y)| *d += g * y * (1.0 - y))
            }),
            Op::Glu(a) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let h = c / 2;
                add_into(&mut grads[a.0], ta.numel(), |d| {
                    for ((drow, xrow), grow) in
                        d.chunks_mut(c).zip(ta.data.chunks(c)).zip(g.chunks(h))
                    {
                        for j in 0..h {
                            let s = sigmoid(xrow[h + j]);
                            drow[j] += grow[j] * s;
                            drow[h + j] += grow[j] * xrow[j] * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let dcols = out.cols();
                add_into(&mut grads[table.0], len(*table), |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut d[id * dcols..(id + 1) * dcols],
                            &g[r * dcols..(r + 1) * dcols],
                            1.0,
                        );
                    }
                });
            }
            Op::Gather { x, idx } => {
                let c = val(*x).cols();
                add_into(&mut grads[x.0], len(*x), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] += g[r];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    add_into(&mut grads[p.0], len(*p), |d| {
                        for (drow, grow) in d.chunks_mut(pc).zip(g.chunks(total)) {
                            axpy(drow, &grow[offset..offset + pc], 1.0);
                        }
                    });
                    offset += pc;
                }
            }
            Op::PadRows { x, left } => {
                let c = out.cols();
                let n = len(*x);
                add_into(&mut grads[x.0], n, |d| axpy(d, &g[left * c..left * c + n], 1.0));
            }
            Op::AvgPool { x, k } => {
                let (m, dcols) = (out.shape[0], out.shape[1]);
                let half = k / 2;
                add_into(&mut grads[x.0], m * dcols, |d| {
                    for t in 0..m {
                        let (lo, hi) = (t.saturating_sub(half), (t + half + 1).min(m));
                        let scale = 1.0 / (hi - lo) as f64;
                        for s in lo..hi {
                            axpy(
                                &mut d[s * dcols..(s + 1) * dcols],
                                &g[t * dcols..(t + 1) * dcols],
                                scale,
                            );
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => add_into(&mut grads[x.0], g.len(), |d| {
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += g[j];
                }
            }),
            Op::Sum(a) => add_into(&mut grads[a.0], len(*a), |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = len(*a);
                add_into(&mut grads[a.0], n, |d| {
                    d.iter_mut().for_each(|v| *v += g[0] / n as f64)
                })
            }
            Op::Log(a) => {
                let ta = &val(*a).data;
                add_into(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(ta)
                        .for_each(|((d, g), x)| *d += g / x)
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = &val(*x).data;
                add_into(&mut grads[x.0], g.len(), |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(tx) {
                        if *v >= *lo && *v <= *hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (cols, width) = (tx.cols(), out.cols());
                add_into(&mut grads[x.0], tx.numel(), |d| {
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(width)) {
                        axpy(&mut drow[*start..start + width], grow, 1.0);
                    }
                });
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g.len(), |d| axpy(d, g, 1.0)),
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Nodes the loss does not depend on report `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradients for the parameter leaves the loss reaches. Parameters it does
    /// not reach are left out, which callers treat as a zero gradient.
    pub fn param_grads(&self) -> Result<Vec<(ParamId, &[f64])>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Autodiff("backward has not been run".into()))?;
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match (&n.op, grads[i].as_deref()) {
                (Op::Param(id), Some(g)) => Some((*id, g)),
                _ => None,
            })
            .collect())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn column_means(data: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut mu = vec![0.0; d];
    for row in data.chunks(d).take(m) {
        axpy(&mut mu, row, 1.0);
    }
    mu.iter_mut().for_each(|v| *v /= m as f64);
    mu
}

/// Two-pass population standard deviation per column.
pub(crate) fn column_stds(data: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mu = column_means(data, m, d);
    let mut var = vec![0.0; d];
    for row in data.chunks(d).take(m) {
        for c in 0..d {
            let e = row[c] - mu[c];
            var[c] += e * e;
        }
    }
    var.into_iter().map(|v| (v / m as f64).sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn add_is_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        for v in g.value(s).data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.log(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn conv_same_padding_preserves_length() {
        // out = m + pl + pr - k + 1
        for m in 1..6 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(m, 2, vec![1.0; m * 2]).unwrap());
            let w = g.constant(Tensor::matrix(6, 4, vec![0.1; 24]).unwrap());
            let b = g.constant(Tensor::vector(vec![0.0; 4]));
            let same = g.conv1d(x, w, b, 1, 1).unwrap();
            assert_eq!(g.value(same).shape(), &[m, 4]);
            let causal = g.conv1d(x, w, b, 2, 0).unwrap();
            assert_eq!(g.value(causal).shape(), &[m, 4]);
        }
    }

    #[test]
    fn std_over_positions_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let s = g.std_over_positions(a, 1e-5).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);
        let b = g.constant(Tensor::matrix(3, 1, vec![5.0, 5.0, 5.0]).unwrap());
        let s = g.std_over_positions(b, 1e-5).unwrap();
        assert_eq!(g.value(s).data(), &[1e-5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softplus_gradient_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.softplus(x).unwrap();
        assert!(close(g.item(y), std::f64::consts::LN_2, 1e-15));
        g.backward(y).unwrap();
        assert!(close(g.grad(x).unwrap()[0], 0.5, 1e-15));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![2.0]));
        let unused = store.add("unused", Tensor::vector(vec![5.0]));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let y = g.mul(u, u).unwrap();
        let y = g.sum(y).unwrap();
        g.backward(y).unwrap();
        store.accumulate(&g, |_| true).unwrap();
        assert_eq!(store.get(used).grad().unwrap(), &[4.0]);
        assert!(store.get(unused).grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn sgd_update_rule() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0));
        store.get_mut(p).accumulate_grad(&[2.0]);
        let sgd = Sgd::new(SgdConfig::default()).unwrap();
        sgd.step(&mut store).unwrap();
        assert!(close(store.get(p).item(), 0.8, 1e-15));
        assert!(store.get(p).grad().is_none());

        store.get_mut(p).accumulate_grad(&[0.0]);
        sgd.step(&mut store).unwrap();
        assert!(close(store.get(p).item(), 0.8, 1e-15));
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_by_name() {
        let mut store = ParamStore::new();
        let p = store.add("decoder.fc", Tensor::scalar(1.0));
        store.get_mut(p).accumulate_grad(&[f64::NAN]);
        let err = Sgd::new(SgdConfig::default())
            .unwrap()
            .step(&mut store)
            .unwrap_err();
        assert!(err.to_string().contains("decoder.fc"));
    }

    #[test]
    fn learning_rate_decays_by_an_order_of_magnitude() {
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        sgd.decay();
        assert!(close(sgd.learning_rate(), 0.01, 1e-15));
        sgd.decay();
        sgd.decay();
        sgd.decay();
        assert!(close(sgd.learning_rate(), 1e-4, 1e-18));
    }

    #[test]
    fn sgd_config_validation() {
        let mut c = SgdConfig::default();
        c.min_learning_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = SgdConfig::default();
        c.decay_factor = 1.0;
        assert!(c.validate().is_err());
    }
}
