//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied since it was created (or
//! last [`Graph::reset`]). Nodes are appended in evaluation order, so the
//! node list is already topologically sorted and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Leaves are either trainable (`requires_grad = true`) or constants. A
//! node that depends only on constants is never visited during the
//! backward sweep, and constant leaves never receive a gradient; this is
//! how frozen parameters are realised.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar precision used for forward values.
///
/// Storage is always `f64`; in `F32` mode every op output is rounded to the
/// nearest single-precision value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LogClamped(Var, f64),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Var, Var),
    /// `winners[e]` is the index into `inputs` that supplied output element `e`.
    MaskedMax {
        inputs: Vec<Var>,
        winners: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogClamped(..) => "log",
            Op::SumAll(..) => "sum",
            Op::GatherRows(..) => "gather_rows",
            Op::SelectCols(..) => "select_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::MaskedMax { .. } => "masked_max",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Standard normal CDF via the exact error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Drop all recorded nodes. Previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of `v`, or `None` if it received none.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.node(v);
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Add a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Add a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unary(&mut self, x: Var, data: Vec<f64>, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::new(shape, data)?, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::contract(format!("{op} expects a 2-D tensor, got shape {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::new(vec![m, n], data)?, rg, Op::MatMul(a, b))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, bool)> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((data, self.requires_grad(a) || self.requires_grad(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, rg) = self.zip_with("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, rg) = self.zip_with("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, rg) = self.zip_with("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, rg, Op::Mul(a, b))
    }

    /// `m[B×N] + row[N]`, broadcasting the row over every line of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("add_row", m)?;
        if self.value(row).len() != cols {
            return Err(Error::Shape {
                op: "add_row",
                left: vec![rows, cols],
                right: self.shape(row).to_vec(),
            });
        }
        let bias = self.value(row).data();
        let data = self
            .value(m)
            .data()
            .chunks(cols)
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let rg = self.requires_grad(m) || self.requires_grad(row);
        self.push(Tensor::new(vec![rows, cols], data)?, rg, Op::AddRow(m, row))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        self.push_unary(x, data, Op::Scale(x, factor))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * v).collect();
        self.push_unary(x, data, Op::Square(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        self.push_unary(x, data, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        self.push_unary(x, data, Op::Tanh(x))
    }

    /// Elementwise `x·Φ(x)` using the exact erf form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * normal_cdf(v)).collect();
        self.push_unary(x, data, Op::Gelu(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = self.value(x).last_dim();
        if width < 2 {
            return Err(Error::contract(format!(
                "softmax needs at least 2 classes, got shape {:?}",
                self.shape(x)
            )));
        }
        let data = softmax_rows(self.value(x).data(), width);
        self.push_unary(x, data, Op::Softmax(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(floor).ln()).collect();
        self.push_unary(x, data, Op::LogClamped(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), rg, Op::SumAll(x))
    }

    /// Rows of a `[V×K]` table picked by `ids`, giving `[ids.len()×K]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let rg = self.requires_grad(table);
        self.push(
            Tensor::new(vec![ids.len(), cols], data)?,
            rg,
            Op::GatherRows(table, ids.to_vec()),
        )
    }

    /// One element per row: `out[i] = x[i, cols[i]]`.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2("select_cols", x)?;
        if cols.len() != rows {
            return Err(Error::Shape {
                op: "select_cols",
                left: vec![rows, width],
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "column index {bad} out of range for width {width}"
            )));
        }
        let src = self.value(x);
        let data = cols.iter().enumerate().map(|(i, &c)| src.at(i, c)).collect();
        let rg = self.requires_grad(x);
        self.push(Tensor::new(vec![rows], data)?, rg, Op::SelectCols(x, cols.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                left: vec![ra, ca],
                right: vec![rb, cb],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::new(vec![ra, ca + cb], data)?, rg, Op::ConcatCols(a, b))
    }

    /// Elementwise maximum over a sequence of `[B×N]` steps, where row `b`
    /// only considers the first `lengths[b]` steps.
    pub fn masked_max(&mut self, steps: &[Var], lengths: &[usize]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::contract("masked_max over zero steps"))?;
        let (rows, cols) = self.dims2("masked_max", first)?;
        if lengths.len() != rows {
            return Err(Error::Shape {
                op: "masked_max",
                left: vec![rows, cols],
                right: vec![lengths.len()],
            });
        }
        for &s in steps {
            self.same_shape("masked_max", first, s)?;
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > steps.len()) {
            return Err(Error::contract(format!(
                "masked_max valid length {bad} outside 1..={}",
                steps.len()
            )));
        }
        let mut data = vec![f64::NEG_INFINITY; rows * cols];
        let mut winners = vec![0usize; rows * cols];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s).data();
            for (b, &len) in lengths.iter().enumerate() {
                if t >= len {
                    continue;
                }
                for c in 0..cols {
                    let e = b * cols + c;
                    if v[e] > data[e] {
                        data[e] = v[e];
                        winners[e] = t;
                    }
                }
            }
        }
        let rg = steps.iter().any(|&s| self.requires_grad(s));
        self.push(
            Tensor::new(vec![rows, cols], data)?,
            rg,
            Op::MaskedMax {
                inputs: steps.to_vec(),
                winners,
            },
        )
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let mask = dropout_mask(&shape, rate, rng);
        let mask = self.constant(mask)?;
        self.mul(x, mask)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// node with `requires_grad`. Existing gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &out_grad);
            self.nodes[idx].grad = Some(out_grad);
        }
        // Only trainable leaves and nodes on a grad path keep a gradient.
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add_grad(&mut self, v: Var, contrib: impl IntoIterator<Item = f64>) {
        if !self.wants(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = accumulate(&mut self.nodes[v.0].grad, len);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Move the op out temporarily so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let n = self.value(*b).last_dim();
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.add_grad(*a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let av = self.value(*a).data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aval = av[i * k + p];
                            if aval == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                    self.add_grad(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(*a, g.iter().copied());
                self.add_grad(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g.iter().copied());
                self.add_grad(*b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.add_grad(*a, d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.add_grad(*b, d);
                }
            }
            Op::AddRow(m, row) => {
                self.add_grad(*m, g.iter().copied());
                if self.wants(*row) {
                    let cols = self.value(*row).len();
                    let mut d = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        for (s, v) in d.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    self.add_grad(*row, d);
                }
            }
            Op::Scale(x, f) => self.add_grad(*x, g.iter().map(|v| v * f)),
            Op::Square(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| 2.0 * xv * gv)
                    .collect();
                self.add_grad(*x, d);
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[idx].value.data();
                let d: Vec<f64> = g.iter().zip(out).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.add_grad(*x, d);
            }
            Op::Tanh(x) => {
                let out = self.nodes[idx].value.data();
                let d: Vec<f64> = g.iter().zip(out).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                self.add_grad(*x, d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * (normal_cdf(xv) + xv * normal_pdf(xv)))
                    .collect();
                self.add_grad(*x, d);
            }
            Op::Softmax(x) => {
                let out = self.nodes[idx].value.data();
                let width = self.nodes[idx].value.last_dim();
                let mut d = vec![0.0; out.len()];
                for ((s, gr), dr) in out.chunks(width).zip(g.chunks(width)).zip(d.chunks_mut(width)) {
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, sv), gv) in dr.iter_mut().zip(s).zip(gr) {
                        *dv = sv * (gv - dot);
                    }
                }
                self.add_grad(*x, d);
            }
            Op::LogClamped(x, floor) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                    .collect();
                self.add_grad(*x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.add_grad(*x, std::iter::repeat_n(g[0], n));
            }
            Op::GatherRows(table, ids) => {
                if self.wants(*table) {
                    let cols = self.value(*table).last_dim();
                    let len = self.value(*table).len();
                    let slot = accumulate(&mut self.nodes[table.0].grad, len);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            slot[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::SelectCols(x, cols) => {
                if self.wants(*x) {
                    let width = self.value(*x).last_dim();
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (i, &c) in cols.iter().enumerate() {
                        d[i * width + c] = g[i];
                    }
                    self.add_grad(*x, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let w = ca + cb;
                let ga: Vec<f64> = g.chunks(w).flat_map(|r| r[..ca].to_vec()).collect();
                let gb: Vec<f64> = g.chunks(w).flat_map(|r| r[ca..].to_vec()).collect();
                self.add_grad(*a, ga);
                self.add_grad(*b, gb);
            }
            Op::MaskedMax { inputs, winners } => {
                for (t, &input) in inputs.iter().enumerate() {
                    if !self.wants(input) {
                        continue;
                    }
                    let d: Vec<f64> = winners
                        .iter()
                        .zip(g)
                        .map(|(&w, &gv)| if w == t { gv } else { 0.0 })
                        .collect();
                    self.add_grad(input, d);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let c = g.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.softmax(x).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-5);
        }
        let shifted = g.constant(t(&[1, 3], &[101.0, 102.0, 103.0])).unwrap();
        let s2 = g.softmax(shifted).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(s2).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_single_class() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 1.0, -1.0])).unwrap();
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841345).abs() < 1e-5);
        assert!((v[1] - v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_squared_distance() {
        let mut g = Graph::new();
        let xs = [0.3, -1.2, 2.0];
        let ts = [1.0, 0.0, -0.5];
        let x = g.param(t(&[3], &xs)).unwrap();
        let target = g.constant(t(&[3], &ts)).unwrap();
        let d = g.sub(x, target).unwrap();
        let sq = g.square(d).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad_data(x).unwrap();
        for i in 0..3 {
            assert!((grad[i] - (xs[i] - ts[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let frozen = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.param(t(&[2, 1], &[0.5, -0.5])).unwrap();
        let y = g.matmul(frozen, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(frozen).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e300])).unwrap();
        assert!(matches!(g.square(x), Err(Error::NonFinite { op: "square" })));
        assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn dropout_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[4, 5], 2.0)).unwrap();
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.4, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());

        let ones = g.constant(Tensor::filled(&[100_000], 1.0)).unwrap();
        let y = g.dropout(ones, 0.4, true, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn masked_max_ignores_steps_beyond_length() {
        let mut g = Graph::new();
        let s0 = g.param(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let s1 = g.param(t(&[2, 1], &[5.0, 7.0])).unwrap();
        let m = g.masked_max(&[s0, s1], &[1, 2]).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 7.0]);
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_data(s0).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.grad_data(s1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(t(&[1], &[0.1])).unwrap();
        assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
    }
}
