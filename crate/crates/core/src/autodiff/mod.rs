//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape and are addressed by [`Var`] handles; trainable parameters live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`]. After
//! [`Tape::backward`] the gradients are returned per parameter.

pub mod layers;
pub mod optim;

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::RngStream;

/// Dense matrix value. Vectors are 1×c rows or r×1 columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} values for shape {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn row(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(matmul_raw(self, other))
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { rows: n, cols: m, data: out }
}

/// `aᵀ b` without forming the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b.data[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a.data[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { rows: n, cols: m, data: out }
}

/// `a bᵀ` without forming the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { rows: n, cols: m, data: out }
}

/// Handle of a stored parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Glorot-uniform matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut RngStream) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients for every parameter of a store, zero where unreachable.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v *= c;
            }
        }
    }
}

/// Handle of a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    OuterSum(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Elu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, scale: Var, shift: Var, xhat: Tensor, inv_std: Vec<f64> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    masks: Vec<Option<Rc<Vec<bool>>>>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch(format!("{op}: {}x{} and {}x{}", a.rows, a.cols, b.rows, b.cols))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), masks: Vec::new(), done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.masks.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|v| f(*v)).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |p, q| p + q, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |p, q| p - q, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |p, q| p * q, Op::Mul(a, b)))
    }

    /// Adds the 1×c row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(r));
        if y.rows != 1 || y.cols != x.cols {
            return Err(shape_err("add_row", x, y));
        }
        let mut t = x.clone();
        for i in 0..t.rows {
            for (v, b) in t.data[i * t.cols..(i + 1) * t.cols].iter_mut().zip(&y.data) {
                *v += b;
            }
        }
        Ok(self.push(t, Op::AddRow(a, r)))
    }

    /// `out_ij = col_i + row_j` for an r×1 column and a 1×c row.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let (x, y) = (self.value(col), self.value(row));
        if x.cols != 1 || y.rows != 1 {
            return Err(shape_err("outer_sum", x, y));
        }
        let t = Tensor::from_fn(x.rows, y.cols, |i, j| x.data[i] + y.data[j]);
        Ok(self.push(t, Op::OuterSum(col, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |v| c * v, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |v| v * v, Op::Square(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    /// `max(slope·x, x)` for slopes below one.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(a))
    }

    /// Row softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Row softmax restricted to entries whose mask is true; the rest are 0.
    /// Every row must keep at least one entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::ShapeMismatch(format!("mask of {} for {}x{}", mask.len(), x.rows, x.cols)));
        }
        for i in 0..x.rows {
            if !mask[i * x.cols..(i + 1) * x.cols].iter().any(|m| *m) {
                return Err(Error::ShapeMismatch(format!("softmax mask row {i} is empty")));
            }
        }
        Ok(self.softmax_impl(a, Some(mask)))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let x = self.value(a);
        let mut t = Tensor::zeros(x.rows, x.cols);
        let keep = |idx: usize| mask.as_ref().is_none_or(|m| m[idx]);
        for i in 0..x.rows {
            let base = i * x.cols;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..x.cols {
                if keep(base + j) {
                    mx = mx.max(x.data[base + j]);
                }
            }
            let mut s = 0.0;
            for j in 0..x.cols {
                if keep(base + j) {
                    let e = (x.data[base + j] - mx).exp();
                    t.data[base + j] = e;
                    s += e;
                }
            }
            for v in &mut t.data[base..base + x.cols] {
                *v /= s;
            }
        }
        let v = self.push(t, Op::SoftmaxRows(a));
        self.masks[v.0] = mask;
        v
    }

    /// Per-row normalization to mean 0 and variance 1, then scale and shift
    /// (both 1×d).
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(shift));
        let d = xv.cols;
        if d < 2 || sv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(shape_err("layer_norm", xv, sv));
        }
        let mut xhat = Tensor::zeros(xv.rows, d);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Tensor::zeros(xv.rows, d);
        for i in 0..xv.rows {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * sv.data[j] + bv.data[j]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, scale, shift, xhat, inv_std }))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols {
            return Err(Error::ShapeMismatch(format!("columns {start}..{} of {}", start + len, x.cols)));
        }
        let t = Tensor::from_fn(x.rows, len, |i, j| x.get(i, start + j));
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            return Err(Error::ShapeMismatch("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            for i in 0..rows {
                t.data[i * cols + off..i * cols + off + x.cols].copy_from_slice(x.row_slice(i));
            }
            off += x.cols;
        }
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut t = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, v) in t.data.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        for o in &mut t.data {
            *o *= inv;
        }
        self.push(t, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor { rows: 1, cols: 1, data: vec![s] }, Op::SumAll(a))
    }

    /// Inverted dropout: survivors are scaled by `1/(1−rate)`. A zero rate or
    /// evaluation mode returns `a` itself.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        if !training || rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        let x = self.value(a);
        let keep = 1.0 / (1.0 - rate);
        let data = (0..x.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let m = self.constant(Tensor { rows: x.rows, cols: x.cols, data });
        self.mul(a, m)
    }

    /// Reverse sweep from a 1×1 loss. A tape supports one sweep.
    pub fn backward(&mut self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalarLoss { rows: lv.rows, cols: lv.cols });
        }
        self.done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, matmul_nt(&g, val(*b)));
                    acc(*b, matmul_tn(val(*a), &g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|v| -v).collect() };
                    acc(*a, g);
                    acc(*b, neg);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let ga = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect() };
                    let gb = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect() };
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                    acc(*r, gr);
                    acc(*a, g);
                }
                Op::OuterSum(c, r) => {
                    let gc = Tensor::from_fn(g.rows, 1, |i, _| g.row_slice(i).iter().sum());
                    let gr = Tensor::from_fn(1, g.cols, |_, j| (0..g.rows).map(|i| g.get(i, j)).sum());
                    acc(*c, gc);
                    acc(*r, gr);
                }
                Op::Scale(a, c) => {
                    let t = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|v| c * v).collect() };
                    acc(*a, t);
                }
                Op::Square(a) => {
                    let x = val(*a);
                    let t = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&x.data).map(|(p, q)| 2.0 * p * q).collect() };
                    acc(*a, t);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a);
                    let data = g.data.iter().zip(&x.data).map(|(p, q)| if *q >= 0.0 { *p } else { slope * p }).collect();
                    acc(*a, Tensor { rows: g.rows, cols: g.cols, data });
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let data = g.data.iter().zip(&x.data).map(|(p, q)| if *q > 0.0 { *p } else { 0.0 }).collect();
                    acc(*a, Tensor { rows: g.rows, cols: g.cols, data });
                }
                Op::Elu(a) => {
                    let x = val(*a);
                    let data = g.data.iter().zip(&x.data).map(|(p, q)| if *q > 0.0 { *p } else { p * q.exp() }).collect();
                    acc(*a, Tensor { rows: g.rows, cols: g.cols, data });
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut t = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..g.cols {
                            t.data[i * g.cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, t);
                }
                Op::LayerNorm { x, scale, shift, xhat, inv_std } => {
                    let d = g.cols;
                    let sv = val(*scale);
                    let mut gs = Tensor::zeros(1, d);
                    let mut gb = Tensor::zeros(1, d);
                    let mut gx = Tensor::zeros(g.rows, d);
                    for i in 0..g.rows {
                        let (gr, hr) = (g.row_slice(i), xhat.row_slice(i));
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            gs.data[j] += gr[j] * hr[j];
                            gb.data[j] += gr[j];
                            let dh = gr[j] * sv.data[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * sv.data[j];
                            gx.data[i * d + j] = inv_std[i] / d as f64 * (d as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                    acc(*x, gx);
                    acc(*scale, gs);
                    acc(*shift, gb);
                }
                Op::SliceCols(a, start) => {
                    let x = val(*a);
                    let mut t = Tensor::zeros(x.rows, x.cols);
                    for i in 0..g.rows {
                        t.data[i * x.cols + start..i * x.cols + start + g.cols].copy_from_slice(g.row_slice(i));
                    }
                    acc(*a, t);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = val(*p).cols;
                        let t = Tensor::from_fn(g.rows, c, |i, j| g.get(i, off + j));
                        acc(*p, t);
                        off += c;
                    }
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let inv = 1.0 / x.rows as f64;
                    let t = Tensor::from_fn(x.rows, x.cols, |_, j| g.data[j] * inv);
                    acc(*a, t);
                }
                Op::SumAll(a) => {
                    let x = val(*a);
                    acc(*a, Tensor::filled(x.rows, x.cols, g.data[0]));
                }
            }
        }

        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).rows, store.get(id).cols)).collect();
        for (id, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                out[id.0] = g;
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Central-difference check of every parameter gradient of the scalar
/// produced by `f`. Returns the largest discrepancy, measured relative to
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check<F>(store: &mut ParamStore, step: f64, floor: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss, store)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l).data[0])
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).data[k] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).data[k];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_parameters_has_unit_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_fn(2, 3, |i, j| (i + j) as f64));
        let b = store.add("b", Tensor::row(&[1.0, -2.0]));
        let unused = store.add("unused", Tensor::row(&[5.0]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let sa = tape.sum_all(va);
        let sb = tape.sum_all(vb);
        let loss = tape.add(sa, sb).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert!(g.get(a).data.iter().all(|v| *v == 1.0));
        assert!(g.get(b).data.iter().all(|v| *v == 1.0));
        assert_eq!(g.get(unused).data, vec![0.0]);
        assert_eq!(tape.backward(loss, &store).unwrap_err(), Error::BackwardTwice);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(2, 2));
        let mut tape = Tape::new();
        let v = tape.param(&store, a);
        assert_eq!(tape.backward(v, &store).unwrap_err(), Error::NotScalarLoss { rows: 2, cols: 2 });
    }

    #[test]
    fn softmax_rows_stable_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(3, 2, vec![0.0, 0.0, 1000.0, 0.0, -800.0, 3.0]).unwrap());
        let y = tape.softmax_rows(x);
        let y = tape.value(y);
        assert_eq!(y.row_slice(0), &[0.5, 0.5]);
        assert!((y.get(1, 0) - 1.0).abs() < 1e-12 && y.get(1, 1) < 1e-12);
        for i in 0..3 {
            assert!((y.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mask = Rc::new(vec![true, false, true, false, true, false]);
        let y = tape.masked_softmax_rows(x, mask).unwrap();
        let y = tape.value(y);
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.row_slice(1), &[0.0, 1.0, 0.0]);
        let bad = Rc::new(vec![false; 6]);
        assert!(tape.masked_softmax_rows(x, bad).is_err());
    }

    #[test]
    fn leaky_relu_values_and_slope() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::row(&[1.0, -1.0, -3.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data, vec![1.0, -0.2, -0.6000000000000001]);
        let s = tape.sum_all(y);
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(p).data, vec![1.0, 0.2, 0.2]);
    }

    #[test]
    fn layer_norm_contract() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0]).unwrap());
        let s = tape.constant(Tensor::filled(1, 3, 1.0));
        let b = tape.constant(Tensor::zeros(1, 3));
        let y = tape.layer_norm(x, s, b, 1e-5).unwrap();
        let y = tape.value(y);
        let r = y.row_slice(0);
        let mean = r.iter().sum::<f64>() / 3.0;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        // The epsilon inside the square root shrinks the variance to
        // v/(v+eps) for a row of population variance v = 2/3.
        assert!(mean.abs() < 1e-12);
        assert!((var - (2.0 / 3.0) / (2.0 / 3.0 + 1e-5)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 2e-5);
        assert_eq!(y.row_slice(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = RngStream::new(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(3, 4, &mut rng));
        let b = store.add("b", rand_tensor(4, 2, &mut rng));
        let r = store.add("r", rand_tensor(1, 2, &mut rng));
        let c = store.add("c", rand_tensor(3, 1, &mut rng));
        let s = store.add("s", rand_tensor(1, 4, &mut rng));
        let t = store.add("t", rand_tensor(1, 4, &mut rng));
        let mask = Rc::new(vec![true, false, true, true, true, false, false, true, true, true, false, true]);
        let err = gradient_check(&mut store, 1e-5, 1e-6, |tape, st| {
            let (va, vb, vr, vc, vs, vt) =
                (tape.param(st, a), tape.param(st, b), tape.param(st, r), tape.param(st, c), tape.param(st, s), tape.param(st, t));
            let m = tape.matmul(va, vb)?;
            let m = tape.add_row(m, vr)?;
            let e = tape.elu(m);
            let l = tape.leaky_relu(e, 0.2);
            let o = tape.outer_sum(vc, vs)?;
            let o = tape.sub(o, va)?;
            let sm = tape.softmax_rows(o);
            let msm = tape.masked_softmax_rows(o, mask.clone())?;
            let ln = tape.layer_norm(va, vs, vt, 1e-5)?;
            let p = tape.mul(ln, sm)?;
            let p = tape.add(p, msm)?;
            let tr = tape.transpose(p);
            let mm = tape.matmul(tr, l)?;
            let sl = tape.slice_cols(mm, 1, 1)?;
            let st = tape.transpose(vs);
            let cat = tape.concat_cols(&[mm, sl, st])?;
            let sq = tape.square(cat);
            let re = tape.relu(cat);
            let q = tape.add(sq, re)?;
            let mr = tape.mean_rows(q);
            let sc = tape.scale(mr, 0.7);
            Ok(tape.sum_all(sc))
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn linear_gradient_against_finite_differences() {
        let mut rng = RngStream::new(8);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(3, 2, &mut rng));
        let b = store.add("b", rand_tensor(1, 2, &mut rng));
        let x = rand_tensor(4, 3, &mut rng);
        let err = gradient_check(&mut store, 1e-5, 1e-8, |tape, st| {
            let xv = tape.constant(x.clone());
            let (wv, bv) = (tape.param(st, w), tape.param(st, b));
            let y = tape.matmul(xv, wv)?;
            let y = tape.add_row(y, bv)?;
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = RngStream::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(100, 1000, 1.0));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.1, true, &mut rng).unwrap();
        let y = tape.value(y);
        let zeros = y.data.iter().filter(|v| **v == 0.0).count() as f64 / y.len() as f64;
        // 10⁵ draws: one percentage point is about ten standard errors.
        assert!((zeros - 0.1).abs() < 0.01, "zero fraction {zeros}");
        assert!((zeros - 0.1).abs() < 4.0 * (0.09f64 / 1e5).sqrt(), "zero fraction {zeros}");
        assert!(y.data.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
        assert!(tape.add(a, b).is_ok());
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }
}
