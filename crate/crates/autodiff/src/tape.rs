//! Define-by-run tape.
//!
//! Every operation evaluates eagerly and records its inputs, so building an
//! expression on a [`Tape`] *is* the forward pass. [`Tape::backward`] then
//! walks the recorded nodes in reverse and accumulates gradients.

use std::collections::HashMap;

use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The kinds of operation a node can hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Exp,
    Log,
    SoftmaxRows,
    LogSoftmaxRows,
    Sum,
    Mean,
    MeanRows,
    GatherCols,
    ConcatCols,
    GumbelNoiseAdd,
    StraightThrough,
    ClampMin,
    MinCols,
    MaxCols,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Input,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::GatherCols,
        OpKind::ConcatCols,
        OpKind::GumbelNoiseAdd,
        OpKind::StraightThrough,
        OpKind::ClampMin,
        OpKind::MinCols,
        OpKind::MaxCols,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::GatherCols => "gather_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GumbelNoiseAdd => "gumbel_noise_add",
            OpKind::StraightThrough => "straight_through",
            OpKind::ClampMin => "clamp_min",
            OpKind::MinCols => "min_cols",
            OpKind::MaxCols => "max_cols",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: Option<String>,
        trainable: bool,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    GumbelNoiseAdd(Var),
    StraightThrough(Var),
    ClampMin(Var, f64),
    MinCols(Var, Vec<usize>),
    MaxCols(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::GatherCols(..) => OpKind::GatherCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GumbelNoiseAdd(..) => OpKind::GumbelNoiseAdd,
            Op::StraightThrough(..) => OpKind::StraightThrough,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::MinCols(..) => OpKind::MinCols,
            Op::MaxCols(..) => OpKind::MaxCols,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records a computation graph while evaluating it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: HashMap<String, Var>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for a named trainable input.
    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|v| self.get(*v))
    }

    /// All gradients of named trainable inputs.
    pub fn named(&self) -> HashMap<String, Tensor> {
        self.names
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Parents of a node, in argument order.
    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.parents_of(&self.nodes[var.0].op)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(AutodiffError::NonFiniteValue {
                op: op.kind().name(),
                node: id,
            });
        }
        let requires_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            _ => self
                .parents_of(&op)
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn parents_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input { .. } => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::GatherCols(a, _)
            | Op::GumbelNoiseAdd(a)
            | Op::StraightThrough(a)
            | Op::ClampMin(a, _)
            | Op::MinCols(a, _)
            | Op::MaxCols(a, _) => vec![*a],
        }
    }

    /// Non-trainable, unnamed input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(
            Op::Input {
                name: None,
                trainable: false,
            },
            value,
        )
    }

    /// Named, non-trainable input.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(
            Op::Input {
                name: Some(name.to_string()),
                trainable: false,
            },
            value,
        )
    }

    /// Named trainable input; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(
            Op::Input {
                name: Some(name.to_string()),
                trainable: true,
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.zip_with("div", a, b, |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    /// Bias add: `[n, m] + [1, m]` (or `[m]`), the only broadcast supported.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tr.len() != ta.cols() || tr.rows() != 1 {
            return Err(shape_err("add_row", ta, tr));
        }
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (v, &b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, row), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var, AutodiffError> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let m = t.cols();
        let mut data = vec![0.0; t.len()];
        for (row, out) in t.data().chunks(m).zip(data.chunks_mut(m)) {
            softmax_row(row, out);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let m = t.cols();
        let mut data = vec![0.0; t.len()];
        for (row, out) in t.data().chunks(m).zip(data.chunks_mut(m)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Column means of an `[n, m]` matrix, as a `[1, m]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if n == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean_rows",
                reason: "no rows".into(),
            });
        }
        let mut out = vec![0.0; m];
        for row in t.data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Op::MeanRows(a), Tensor::row(out))
    }

    /// Selects columns of an `[n, m]` matrix; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_cols",
                reason: format!("column {bad} out of range for {m} columns"),
            });
        }
        let p = indices.len();
        let mut data = Vec::with_capacity(n * p);
        for row in t.data().chunks(m.max(1)).take(n) {
            data.extend(indices.iter().map(|&j| row[j]));
        }
        let v = Tensor::matrix(n, p, data)?;
        self.push(Op::GatherCols(a, indices.to_vec()), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            })?;
        let n = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.rows() != n || t.shape().len() != 2 {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let v = Tensor::matrix(n, total, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Adds a fixed noise sample (e.g. Gumbel draws) to `a`; the noise carries
    /// no gradient.
    pub fn gumbel_noise_add(&mut self, a: Var, noise: &Tensor) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if !t.same_shape(noise) {
            return Err(shape_err("gumbel_noise_add", t, noise));
        }
        let data = t
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, e)| x + e)
            .collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::GumbelNoiseAdd(a), v)
    }

    /// Forward value is `hard`; the backward pass routes the incoming gradient
    /// to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var, AutodiffError> {
        let t = self.value(soft);
        if !t.same_shape(&hard) {
            return Err(shape_err("straight_through", t, &hard));
        }
        self.push(Op::StraightThrough(soft), hard)
    }

    /// `max(a, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, AutodiffError> {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v)
    }

    fn reduce_cols(
        &mut self,
        a: Var,
        name: &'static str,
        better: impl Fn(f64, f64) -> bool,
    ) -> Result<(Tensor, Vec<usize>), AutodiffError> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if m == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: name,
                reason: "no columns".into(),
            });
        }
        let mut vals = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n);
        for row in t.data().chunks(m) {
            let mut best = 0;
            for j in 1..m {
                if better(row[j], row[best]) {
                    best = j;
                }
            }
            vals.push(row[best]);
            idx.push(best);
        }
        Ok((Tensor::column(vals), idx))
    }

    /// Row-wise minimum `[n, m] -> [n, 1]`; ties resolve to the first column.
    pub fn min_cols(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (v, idx) = self.reduce_cols(a, "min_cols", |x, y| x < y)?;
        self.push(Op::MinCols(a, idx), v)
    }

    /// Row-wise maximum `[n, m] -> [n, 1]`; ties resolve to the first column.
    pub fn max_cols(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (v, idx) = self.reduce_cols(a, "max_cols", |x, y| x > y)?;
        self.push(Op::MaxCols(a, idx), v)
    }

    /// Column index selected per row by a `min_cols`/`max_cols` node.
    pub fn selected_cols(&self, var: Var) -> Option<&[usize]> {
        match &self.nodes[var.0].op {
            Op::MinCols(_, idx) | Op::MaxCols(_, idx) => Some(idx),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_val.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.all_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    op: node.op.kind().name(),
                    node: id,
                });
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut names = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let Op::Input {
                name: Some(name),
                trainable: true,
            } = &node.op
            {
                names.insert(name.clone(), Var(i));
            }
        }
        // only trainable inputs keep their gradients in the public view
        for (i, slot) in grads.iter_mut().enumerate() {
            let keep = matches!(
                self.nodes[i].op,
                Op::Input {
                    trainable: true,
                    ..
                }
            );
            if !keep {
                *slot = None;
            }
        }
        Ok(Gradients { grads, names })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        match op {
            Op::Input { .. } => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let gb = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, gb);
                }
                if self.needs(*b) {
                    let ga = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let m = g.cols();
                    let mut sums = vec![0.0; m];
                    for r in g.data().chunks(m) {
                        for (s, v) in sums.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, sums)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) | Op::GumbelNoiseAdd(a) | Op::StraightThrough(a) => {
                self.accumulate(grads, *a, g.clone())
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Exp(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, e)| gv * e)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let m = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((s, gr), dr) in out
                    .data()
                    .chunks(m)
                    .zip(g.data().chunks(m))
                    .zip(d.chunks_mut(m))
                {
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((o, sv), gv) in dr.iter_mut().zip(s).zip(gr) {
                        *o = sv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LogSoftmaxRows(a) => {
                let m = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((ls, gr), dr) in out
                    .data()
                    .chunks(m)
                    .zip(g.data().chunks(m))
                    .zip(d.chunks_mut(m))
                {
                    let total: f64 = gr.iter().sum();
                    for ((o, l), gv) in dr.iter_mut().zip(ls).zip(gr) {
                        *o = gv - l.exp() * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = g.item() / x.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(x.shape(), v));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let mut d = Vec::with_capacity(x.len());
                for _ in 0..x.rows() {
                    d.extend(g.data().iter().map(|v| v / n));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::GatherCols(a, idx) => {
                let x = self.value(*a);
                let m = x.cols();
                let p = idx.len();
                let mut d = vec![0.0; x.len()];
                for (i, gr) in g.data().chunks(p.max(1)).enumerate().take(x.rows()) {
                    for (&j, gv) in idx.iter().zip(gr) {
                        d[i * m + j] += gv;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let x = self.value(*p);
                    let c = x.cols();
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(x.len());
                        for gr in g.data().chunks(total) {
                            d.extend_from_slice(&gr[offset..offset + c]);
                        }
                        self.accumulate(grads, *p, Tensor::new(x.shape().to_vec(), d)?);
                    }
                    offset += c;
                }
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv >= *floor { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::MinCols(a, idx) | Op::MaxCols(a, idx) => {
                let x = self.value(*a);
                let m = x.cols();
                let mut d = vec![0.0; x.len()];
                for (i, (&j, gv)) in idx.iter().zip(g.data()).enumerate() {
                    d[i * m + j] = *gv;
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}
