//! Dense `f64` tensors and a dynamic reverse-mode gradient tape.
//!
//! A [`Tensor`] is plain row-major data. Computation happens on a [`Graph`]:
//! every operation appends a node holding its output value and the ids of its
//! inputs, and [`Graph::backward`] walks the nodes in strict reverse append
//! order. The graph is rebuilt for every forward pass because adapter-generated
//! weights change its structure step to step.
//!
//! Broadcasting is limited to a scalar (one-element) operand of a binary op.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix; panics on non-matrices.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.len());
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    LogClamped(Var, f64),
    Scale(Var, f64),
    Softmax(Var),
    SoftmaxRows(Var),
    LogSoftmax(Var),
    Sum(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    StackRows(Vec<Var>),
    MulCols(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The gradient tape. Confined to one thread for the duration of a pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    clamp_hits: usize,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
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

    /// Drops every node so the graph can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.clamp_hits = 0;
    }

    /// Number of times [`Graph::log_clamped`] hit its floor since the last reset.
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
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

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Domain {
                op,
                detail: format!("expected rank {rank}, got shape {s:?}"),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("matmul_nt", a, 2)?;
        self.expect_rank("matmul_nt", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.derived(Tensor { shape: vec![m, n], data: out }, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Matrix-vector product `w · x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.expect_rank("matvec", w, 2)?;
        self.expect_rank("matvec", x, 1)?;
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw[1] != sx[0] {
            return Err(Error::shape("matvec", sw, sx));
        }
        let (m, n) = (sw[0], sw[1]);
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * xd[j];
            }
            *o = s;
        }
        Ok(self.derived(Tensor::vector(out), Op::MatVec(w, x), &[w, x]))
    }

    /// Row-vector-matrix product `x · w`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        self.expect_rank("vecmat", x, 1)?;
        self.expect_rank("vecmat", w, 2)?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw[0] != sx[0] {
            return Err(Error::shape("vecmat", sx, sw));
        }
        let (m, n) = (sw[0], sw[1]);
        let out = matmul_raw(self.value(x).data(), self.value(w).data(), 1, m, n);
        Ok(self.derived(Tensor::vector(out), Op::VecMat(x, w), &[x, w]))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: ta.shape.clone(), data }
        } else if tb.len() == 1 {
            let y = tb.data[0];
            let data = ta.data.iter().map(|&x| f(x, y)).collect();
            Tensor { shape: ta.shape.clone(), data }
        } else if ta.len() == 1 {
            let x = ta.data[0];
            let data = tb.data.iter().map(|&y| f(x, y)).collect();
            Tensor { shape: tb.shape.clone(), data }
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(op, &ta.shape, &tb.shape));
        };
        Ok(self.derived(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product (or scaling by a one-element operand).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = t.data.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} is not positive"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
        };
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        Ok(self.derived(value, Op::Unary(kind, a), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// `ln(max(x, floor))`; entries at the floor get a zero gradient and
    /// bump [`Graph::clamp_hits`].
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.value(a);
        let mut hits = 0;
        let data = t
            .data
            .iter()
            .map(|&x| {
                if x > floor {
                    x.ln()
                } else {
                    hits += 1;
                    floor.ln()
                }
            })
            .collect();
        let value = Tensor { shape: t.shape.clone(), data };
        self.clamp_hits += hits;
        Ok(self.derived(value, Op::LogClamped(a, floor), &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * c).collect(),
        };
        Ok(self.derived(value, Op::Scale(a, c), &[a]))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("{op} input")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("softmax", a, 1)?;
        self.check_finite("softmax", a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("softmax of an empty vector".into()));
        }
        let mut out = vec![0.0; t.len()];
        softmax_slice(&t.data, &mut out);
        Ok(self.derived(Tensor::vector(out), Op::Softmax(a), &[a]))
    }

    /// Softmax applied independently to each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("softmax_rows", a, 2)?;
        self.check_finite("softmax_rows", a)?;
        let t = self.value(a);
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_slice(&t.data[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        Ok(self.derived(Tensor { shape: vec![r, c], data: out }, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("log_softmax", a, 1)?;
        self.check_finite("log_softmax", a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("log_softmax of an empty vector".into()));
        }
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = t.data.iter().map(|x| x - lse).collect();
        Ok(self.derived(Tensor::vector(out), Op::LogSoftmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape("dot", &ta.shape, &tb.shape));
        }
        let mut s = 0.0;
        for (x, y) in ta.data.iter().zip(&tb.data) {
            s += x * y;
        }
        Ok(self.derived(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            self.expect_rank("concat", p, 1)?;
            data.extend_from_slice(&self.value(p).data);
        }
        Ok(self.derived(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.expect_rank("slice", a, 1)?;
        let t = self.value(a);
        if start + len > t.len() {
            return Err(Error::shape("slice", &t.shape, &[start + len]));
        }
        let data = t.data[start..start + len].to_vec();
        Ok(self.derived(Tensor::vector(data), Op::Slice(a, start), &[a]))
    }

    /// Row `r` of a matrix as a vector (an embedding lookup).
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.expect_rank("row", a, 2)?;
        let t = self.value(a);
        if r >= t.shape[0] {
            return Err(Error::Domain {
                op: "row",
                detail: format!("row {r} out of range for shape {:?}", t.shape),
            });
        }
        let data = t.row(r).to_vec();
        Ok(self.derived(Tensor::vector(data), Op::Row(a, r), &[a]))
    }

    /// Picks `a[idx[0]], a[idx[1]], …` from a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.expect_rank("gather", a, 1)?;
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Domain {
                op: "gather",
                detail: format!("index {bad} out of range for length {}", t.len()),
            });
        }
        let data = idx.iter().map(|&i| t.data[i]).collect();
        Ok(self.derived(Tensor::vector(data), Op::Gather(a, idx.to_vec()), &[a]))
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::Contract("stack_rows of zero rows".into()));
        };
        let n = self.value(first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            self.expect_rank("stack_rows", r, 1)?;
            if self.value(r).len() != n {
                return Err(Error::shape("stack_rows", &[n], self.shape(r)));
            }
            data.extend_from_slice(&self.value(r).data);
        }
        let value = Tensor { shape: vec![rows.len(), n], data };
        Ok(self.derived(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// `m · diag(s)`: scales column `z` of `m` by `s[z]`.
    pub fn mul_cols(&mut self, m: Var, s: Var) -> Result<Var> {
        self.expect_rank("mul_cols", m, 2)?;
        self.expect_rank("mul_cols", s, 1)?;
        let (tm, ts) = (self.value(m), self.value(s));
        let c = tm.shape[1];
        if ts.len() != c {
            return Err(Error::shape("mul_cols", &tm.shape, &ts.shape));
        }
        let data = tm
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * ts.data[i % c])
            .collect();
        let value = Tensor { shape: tm.shape.clone(), data };
        Ok(self.derived(value, Op::MulCols(m, s), &[m, s]))
    }

    /// Reverse sweep from a scalar loss. Leaves that do not influence the
    /// loss get zero gradients from [`Gradients::get`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Adds into the gradient buffer of `v` if it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let out = &nodes[idx].value;

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(a, &mut |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                acc(b, &mut |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &mut buf[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                });
            }
            &Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                acc(a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &tb.data[j * k..(j + 1) * k];
                            let arow = &mut buf[i * k..(i + 1) * k];
                            for p in 0..k {
                                arow[p] += gv * brow[p];
                            }
                        }
                    }
                });
                acc(b, &mut |buf| {
                    for i in 0..m {
                        let arow = &ta.data[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &mut buf[j * k..(j + 1) * k];
                            for p in 0..k {
                                brow[p] += gv * arow[p];
                            }
                        }
                    }
                });
            }
            &Op::MatVec(w, x) => {
                let (tw, tx) = (val(w), val(x));
                let (m, n) = (tw.shape[0], tw.shape[1]);
                acc(w, &mut |buf| {
                    for i in 0..m {
                        let gi = g[i];
                        let row = &mut buf[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += gi * tx.data[j];
                        }
                    }
                });
                acc(x, &mut |buf| {
                    for i in 0..m {
                        let gi = g[i];
                        let row = &tw.data[i * n..(i + 1) * n];
                        for j in 0..n {
                            buf[j] += row[j] * gi;
                        }
                    }
                });
            }
            &Op::VecMat(x, w) => {
                let (tx, tw) = (val(x), val(w));
                let (m, n) = (tw.shape[0], tw.shape[1]);
                acc(x, &mut |buf| {
                    for i in 0..m {
                        let row = &tw.data[i * n..(i + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += row[j] * g[j];
                        }
                        buf[i] += s;
                    }
                });
                acc(w, &mut |buf| {
                    for i in 0..m {
                        let xi = tx.data[i];
                        let row = &mut buf[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += xi * g[j];
                        }
                    }
                });
            }
            &Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(a), val(b));
                let n = out.len();
                let av = |i: usize| if ta.len() == 1 { ta.data[0] } else { ta.data[i] };
                let bv = |i: usize| if tb.len() == 1 { tb.data[0] } else { tb.data[i] };
                // d/da and d/db of the elementwise op at position i.
                let da = |i: usize| match kind {
                    Binary::Add | Binary::Sub => 1.0,
                    Binary::Mul => bv(i),
                };
                let db = |i: usize| match kind {
                    Binary::Add => 1.0,
                    Binary::Sub => -1.0,
                    Binary::Mul => av(i),
                };
                let scatter = |buf: &mut [f64], d: &dyn Fn(usize) -> f64| {
                    if buf.len() == 1 && n != 1 {
                        buf[0] += (0..n).map(|i| g[i] * d(i)).sum::<f64>();
                    } else {
                        for i in 0..n {
                            buf[i] += g[i] * d(i);
                        }
                    }
                };
                acc(a, &mut |buf| scatter(buf, &da));
                acc(b, &mut |buf| scatter(buf, &db));
            }
            &Op::Unary(kind, a) => {
                let ta = val(a);
                acc(a, &mut |buf| {
                    for i in 0..buf.len() {
                        let y = out.data[i];
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Exp => y,
                            Unary::Log => 1.0 / ta.data[i],
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            &Op::LogClamped(a, floor) => {
                let ta = val(a);
                acc(a, &mut |buf| {
                    for i in 0..buf.len() {
                        let x = ta.data[i];
                        if x > floor {
                            buf[i] += g[i] / x;
                        }
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |buf| {
                for i in 0..buf.len() {
                    buf[i] += c * g[i];
                }
            }),
            &Op::Softmax(a) => acc(a, &mut |buf| {
                let y = &out.data;
                let dotgy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for i in 0..buf.len() {
                    buf[i] += y[i] * (g[i] - dotgy);
                }
            }),
            &Op::SoftmaxRows(a) => acc(a, &mut |buf| {
                let (r, c) = (out.shape[0], out.shape[1]);
                for row in 0..r {
                    let y = &out.data[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dotgy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        buf[row * c + j] += y[j] * (gr[j] - dotgy);
                    }
                }
            }),
            &Op::LogSoftmax(a) => acc(a, &mut |buf| {
                let gsum: f64 = g.iter().sum();
                for i in 0..buf.len() {
                    buf[i] += g[i] - out.data[i].exp() * gsum;
                }
            }),
            &Op::Sum(a) => acc(a, &mut |buf| {
                for b in buf.iter_mut() {
                    *b += g[0];
                }
            }),
            &Op::Dot(a, b) => {
                let (ta, tb) = (val(a), val(b));
                acc(a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[0] * tb.data[i];
                    }
                });
                acc(b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[0] * ta.data[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |buf| {
                        for i in 0..len {
                            buf[i] += g[off + i];
                        }
                    });
                    off += len;
                }
            }
            &Op::Slice(a, start) => acc(a, &mut |buf| {
                for (i, gv) in g.iter().enumerate() {
                    buf[start + i] += gv;
                }
            }),
            &Op::Row(a, r) => acc(a, &mut |buf| {
                let c = g.len();
                for (i, gv) in g.iter().enumerate() {
                    buf[r * c + i] += gv;
                }
            }),
            Op::Gather(a, idxs) => acc(*a, &mut |buf| {
                for (gv, &i) in g.iter().zip(idxs) {
                    buf[i] += gv;
                }
            }),
            Op::StackRows(rows) => {
                for (r, &v) in rows.iter().enumerate() {
                    let c = val(v).len();
                    acc(v, &mut |buf| {
                        for i in 0..c {
                            buf[i] += g[r * c + i];
                        }
                    });
                }
            }
            &Op::MulCols(m, s) => {
                let (tm, ts) = (val(m), val(s));
                let c = ts.len();
                acc(m, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ts.data[i % c];
                    }
                });
                acc(s, &mut |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % c] += gv * tm.data[i];
                    }
                });
            }
        }
    }
}

/// Gradients of trainable leaves after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` is not a trainable leaf reached by
    /// the loss.
    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; zeros of `v`'s shape when the loss does not reach it.
    pub fn get(&self, v: Var, graph: &Graph) -> Tensor {
        match self.get_opt(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.shape(v)),
        }
    }
}
