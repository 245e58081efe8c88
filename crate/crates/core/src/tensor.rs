//! Dense row-major matrices with a tape-recorded reverse-mode differentiator.
//!
//! Every value in a [`Graph`] is a 2-D matrix (`rows x cols`); vectors are
//! `1 x n` rows. Learnable parameters live in a [`ParamStore`] that the graph
//! borrows immutably, so a forward pass never copies weight matrices. Calling
//! [`Graph::backward`] returns a [`Gradients`] value which the caller folds
//! back into the store with [`ParamStore::accumulate`].
//!
//! Broadcasting is limited to adding a `1 x n` bias row ([`Graph::add_row`])
//! and the per-row gate of [`Graph::mix`]. Any other shape disagreement is a
//! [`TensorError::ShapeMismatch`].

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A named learnable array. `shape` is the logical shape; inside a graph a
/// rank-1 tensor is treated as a single row.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || shape.len() > 2 || n != values.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                detail: format!("shape {:?} does not describe {} values", shape, values.len()),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("validated at construction"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Adds a parameter initialised uniformly in `[-scale, scale]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape, values)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds `grads` into each parameter's accumulator.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (tensor, g) in self.tensors.iter_mut().zip(&grads.params) {
            let Some(g) = g else { continue };
            match &mut tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => tensor.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// L2 norm over all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    RowSelect(NodeId, Vec<usize>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Mix(NodeId, NodeId, NodeId),
    Scatter(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::RowSelect(..) => "row_select",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Mix(..) => "mix",
            Op::Scatter(..) => "scatter",
            Op::Pick(..) => "pick",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// `None` for parameter leaves, whose values stay in the store.
    value: Option<Vec<f64>>,
}

/// The computation record: nodes are appended in execution order, which is
/// a topological order by construction.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Option<Vec<f64>>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
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

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// `out += a (m x k) * b (k x n)`.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m x k) * b^T` where `b` is `n x k`.
fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a^T * b` where `a` is `m x k` and `b` is `m x n`; `out` is `k x n`.
fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params.get(*p).values,
            (None, _) => unreachable!("non-parameter nodes always own their value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(rows * cols, value.len(), "{}", op.name());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let (rows, cols) = self.params.get(id).dims();
        self.nodes.push(Node {
            op: Op::Param(id),
            rows,
            cols,
            value: None,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    /// Leaf holding fixed data. Gradients still flow into it and can be read
    /// back from [`Gradients::node`].
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<NodeId> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(TensorError::InvalidArgument {
                op: "constant",
                detail: format!("{rows}x{cols} does not hold {} values", values.len()),
            });
        }
        Ok(self.push(Op::Constant, rows, cols, values))
    }

    pub fn row(&mut self, values: Vec<f64>) -> Result<NodeId> {
        let n = values.len();
        self.constant(1, n, values)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), m, n, out))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(mismatch("matmul_t", (m, k), (n, k2)));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Op::MatMulT(a, b), m, n, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch("add", sa, sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), sa.0, sa.1, out))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, n) {
            return Err(mismatch("add_row", (m, n), sb));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Op::AddRow(a, bias), m, n, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), sa.0, sa.1, out))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), m, n, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(mismatch("concat_cols", self.shape(first), s));
            }
            cols += s.1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let cols = self.shape(first).1;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(mismatch("concat_rows", self.shape(first), s));
            }
            rows += s.0;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), rows, cols, out))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                detail: format!("columns {start}..{} out of {n}", start + len),
            });
        }
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Op::SliceCols(a, start), m, len, out))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if len == 0 || start + len > m {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {m}", start + len),
            });
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(Op::SliceRows(a, start), len, n, out))
    }

    /// Gathers rows of `table` (embedding lookup).
    pub fn row_select(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(table);
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "row_select",
                detail: "no row ids".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(TensorError::InvalidArgument {
                op: "row_select",
                detail: format!("row {bad} out of {m}"),
            });
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        Ok(self.push(Op::RowSelect(table, ids.to_vec()), ids.len(), n, out))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), m, n, out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), m, n, out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for (src, dst) in self.value(a).chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        self.push(Op::Softmax(a), m, n, out)
    }

    /// Row-wise log-softmax, fused so that no probability is ever logged.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for (src, dst) in self.value(a).chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(src, dst);
        }
        self.push(Op::LogSoftmax(a), m, n, out)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(Op::Log(a), m, n, out)
    }

    /// Scalar mix `g * a + (1 - g) * b`, where `g` is `rows x 1` and applies
    /// per row.
    pub fn mix(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch("mix", sa, sb));
        }
        let sg = self.shape(gate);
        if sg != (sa.0, 1) {
            return Err(mismatch("mix", sg, sa));
        }
        let (m, n) = sa;
        let g = self.value(gate);
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let w = g[r];
            for c in 0..n {
                out.push(w * va[r * n + c] + (1.0 - w) * vb[r * n + c]);
            }
        }
        Ok(self.push(Op::Mix(gate, a, b), m, n, out))
    }

    /// `out[r, ids[i]] += a[r, i]`, producing `rows x width`.
    pub fn scatter(&mut self, a: NodeId, ids: &[usize], width: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if ids.len() != n {
            return Err(mismatch("scatter", (m, n), (1, ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= width) {
            return Err(TensorError::InvalidArgument {
                op: "scatter",
                detail: format!("column {bad} out of {width}"),
            });
        }
        let v = self.value(a);
        let mut out = vec![0.0; m * width];
        for r in 0..m {
            for (i, &col) in ids.iter().enumerate() {
                out[r * width + col] += v[r * n + i];
            }
        }
        Ok(self.push(Op::Scatter(a, ids.to_vec()), m, width, out))
    }

    /// One entry per row: `out[r] = a[r, cols[r]]`, shaped `rows x 1`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if cols.len() != m {
            return Err(mismatch("pick", (m, n), (cols.len(), 1)));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                detail: format!("column {bad} out of {n}"),
            });
        }
        let v = self.value(a);
        let out = cols.iter().enumerate().map(|(r, &c)| v[r * n + c]).collect();
        Ok(self.push(Op::Pick(a, cols.to_vec()), m, 1, out))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![total])
    }

    /// Recomputes every node from the leaves, in record order.
    pub fn replay(&self) -> Vec<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: &NodeId| -> &[f64] { &values[id.0] };
            let (rows, cols) = (node.rows, node.cols);
            let out = match &node.op {
                Op::Param(p) => self.params.get(*p).values.clone(),
                Op::Constant => node.value.clone().unwrap_or_default(),
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let mut out = vec![0.0; rows * cols];
                    gemm(v(a), v(b), &mut out, rows, k, cols);
                    out
                }
                Op::MatMulT(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let mut out = vec![0.0; rows * cols];
                    gemm_bt(v(a), v(b), &mut out, rows, k, cols);
                    out
                }
                Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
                Op::AddRow(a, b) => {
                    let bias = v(b);
                    v(a).chunks(cols)
                        .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
                        .collect()
                }
                Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
                Op::Scale(a, f) => v(a).iter().map(|x| x * f).collect(),
                Op::ConcatCols(parts) => {
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for p in parts {
                            let c = self.nodes[p.0].cols;
                            out.extend_from_slice(&v(p)[r * c..(r + 1) * c]);
                        }
                    }
                    out
                }
                Op::ConcatRows(parts) => parts.iter().flat_map(|p| v(p).iter().copied()).collect(),
                Op::SliceCols(a, start) => {
                    let n = self.nodes[a.0].cols;
                    v(a).chunks(n)
                        .flat_map(|row| row[*start..*start + cols].iter().copied())
                        .collect()
                }
                Op::SliceRows(a, start) => v(a)[start * cols..(start + rows) * cols].to_vec(),
                Op::RowSelect(a, ids) => ids
                    .iter()
                    .flat_map(|&i| v(a)[i * cols..(i + 1) * cols].iter().copied())
                    .collect(),
                Op::Tanh(a) => v(a).iter().map(|x| x.tanh()).collect(),
                Op::Sigmoid(a) => v(a).iter().map(|&x| sigmoid(x)).collect(),
                Op::Softmax(a) => {
                    let mut out = vec![0.0; rows * cols];
                    for (s, d) in v(a).chunks(cols).zip(out.chunks_mut(cols)) {
                        softmax_row(s, d);
                    }
                    out
                }
                Op::LogSoftmax(a) => {
                    let mut out = vec![0.0; rows * cols];
                    for (s, d) in v(a).chunks(cols).zip(out.chunks_mut(cols)) {
                        log_softmax_row(s, d);
                    }
                    out
                }
                Op::Log(a) => v(a).iter().map(|x| x.ln()).collect(),
                Op::Mix(g, a, b) => {
                    let (g, a, b) = (v(g), v(a), v(b));
                    (0..rows * cols)
                        .map(|i| {
                            let w = g[i / cols];
                            w * a[i] + (1.0 - w) * b[i]
                        })
                        .collect()
                }
                Op::Scatter(a, ids) => {
                    let n = ids.len();
                    let mut out = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for (i, &c) in ids.iter().enumerate() {
                            out[r * cols + c] += v(a)[r * n + i];
                        }
                    }
                    out
                }
                Op::Pick(a, picks) => {
                    let n = self.nodes[a.0].cols;
                    picks.iter().enumerate().map(|(r, &c)| v(a)[r * n + c]).collect()
                }
                Op::Sum(a) => vec![v(a).iter().sum()],
            };
            values.push(out);
        }
        values
    }

    /// Reverse sweep from a `1 x 1` loss. Each node is visited once, in
    /// reverse record order; fan-out contributions are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(vec![shape.0, shape.1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Param(_) | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let da = acc(&mut grads, *a, self.nodes[a.0].rows * k);
                    gemm_bt(&g, self.value(*b), da, rows, cols, k);
                    let db = acc(&mut grads, *b, k * cols);
                    gemm_at(self.value(*a), &g, db, rows, k, cols);
                }
                Op::MatMulT(a, b) => {
                    // out = a * b^T; a: rows x k, b: cols x k
                    let k = self.nodes[a.0].cols;
                    let da = acc(&mut grads, *a, rows * k);
                    gemm(&g, self.value(*b), da, rows, cols, k);
                    let db = acc(&mut grads, *b, cols * k);
                    gemm_at(&g, self.value(*a), db, rows, cols, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let db = acc(&mut grads, *b, cols);
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                    let db = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
                Op::Scale(a, f) => {
                    let da = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * f;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].cols;
                        let dp = acc(&mut grads, *p, rows * c);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * c..(r + 1) * c],
                                &g[r * cols + offset..r * cols + offset + c],
                            );
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].rows * cols;
                        add_into(acc(&mut grads, *p, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let n = self.nodes[a.0].cols;
                    let da = acc(&mut grads, *a, rows * n);
                    for r in 0..rows {
                        add_into(
                            &mut da[r * n + start..r * n + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::SliceRows(a, start) => {
                    let total = self.nodes[a.0].rows * cols;
                    let da = acc(&mut grads, *a, total);
                    add_into(&mut da[start * cols..(start + rows) * cols], &g);
                }
                Op::RowSelect(a, ids) => {
                    let total = self.nodes[a.0].rows * cols;
                    let da = acc(&mut grads, *a, total);
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut da[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.value(NodeId(idx));
                    let da = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value(NodeId(idx));
                    let da = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(NodeId(idx));
                    let da = acc(&mut grads, *a, g.len());
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (d, (p, q)) in da[span].iter_mut().zip(yr.iter().zip(gr)) {
                            *d += p * (q - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(NodeId(idx));
                    let da = acc(&mut grads, *a, g.len());
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let total: f64 = gr.iter().sum();
                        for (d, (ly, q)) in da[span].iter_mut().zip(yr.iter().zip(gr)) {
                            *d += q - ly.exp() * total;
                        }
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let da = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] / x[i];
                    }
                }
                Op::Mix(gate, a, b) => {
                    let (vg, va, vb) = (self.value(*gate), self.value(*a), self.value(*b));
                    let mut dgate = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dgate[r] += g[i] * (va[i] - vb[i]);
                        }
                    }
                    add_into(acc(&mut grads, *gate, rows), &dgate);
                    let da = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * vg[i / cols];
                    }
                    let db = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * (1.0 - vg[i / cols]);
                    }
                }
                Op::Scatter(a, ids) => {
                    let n = ids.len();
                    let da = acc(&mut grads, *a, rows * n);
                    for r in 0..rows {
                        for (i, &c) in ids.iter().enumerate() {
                            da[r * n + i] += g[r * cols + c];
                        }
                    }
                }
                Op::Pick(a, picks) => {
                    let n = self.nodes[a.0].cols;
                    let da = acc(&mut grads, *a, rows * n);
                    for (r, &c) in picks.iter().enumerate() {
                        da[r * n + c] += g[r];
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].rows * self.nodes[a.0].cols;
                    acc(&mut grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = vec![None; self.params.len()];
        for (pid, node) in &self.param_nodes {
            params[pid.0] = grads[node.0].clone();
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Per-parameter comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_error > self.tolerance)
    }
}

/// Relative error with the denominator floored at [`REL_ERROR_FLOOR`], so
/// that gradients that are numerically zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub const FD_STEP: f64 = 1e-5;

/// Checks every parameter element of `params` against central differences
/// of `model_fn` with step [`FD_STEP`]. `model_fn` must build a scalar loss
/// deterministically from the parameters it is given.
pub fn gradient_check<F, E>(
    model_fn: F,
    params: &mut ParamStore,
    tolerance: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> std::result::Result<NodeId, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = model_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new(p);
        let loss = model_fn(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut entries = Vec::with_capacity(params.len());
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.get(id).len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(id).values[i];
            params.get_mut(id).values[i] = orig + FD_STEP;
            let plus = eval(params)?;
            params.get_mut(id).values[i] = orig - FD_STEP;
            let minus = eval(params)?;
            params.get_mut(id).values[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.param(id).map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            checked: n,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = empty();
        let mut g = Graph::new(&p);
        let x = g.row(vec![0.0, 0.0]).unwrap();
        let s = g.softmax(x);
        assert_eq!(g.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let p = empty();
        let mut g = Graph::new(&p);
        let x = g.row(vec![0.0]).unwrap();
        let s = g.sigmoid(x);
        assert_eq!(g.scalar(s), 0.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[0.25]);
    }

    #[test]
    fn matmul_by_hand() {
        let p = empty();
        let mut g = Graph::new(&p);
        let a = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(2, 1, vec![1.0, 1.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), (2, 1));
        assert_eq!(g.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let p = empty();
        let mut g = Graph::new(&p);
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
        assert!(matches!(g.add_row(a, c), Err(TensorError::ShapeMismatch { op: "add_row", .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = empty();
        let mut g = Graph::new(&p);
        let a = g.row(vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let p = empty();
        let mut g = Graph::new(&p);
        let x = g.row(vec![1.0, 2.0, 3.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_softmax_pick_gradient_is_softmax_minus_onehot() {
        let p = empty();
        let mut g = Graph::new(&p);
        let xs = vec![0.3, -1.2, 2.0, 0.5];
        let x = g.row(xs.clone()).unwrap();
        let ls = g.log_softmax(x);
        let picked = g.pick(ls, &[2]).unwrap();
        let loss = g.sum(picked);
        let grads = g.backward(loss).unwrap();
        let max = 2.0_f64;
        let z: f64 = xs.iter().map(|v| (v - max).exp()).sum();
        for (i, d) in grads.node(x).unwrap().iter().enumerate() {
            let soft = (xs[i] - max).exp() / z;
            let onehot = if i == 2 { 1.0 } else { 0.0 };
            // d/dx log softmax_k = onehot - softmax
            assert!((d - (onehot - soft)).abs() < 1e-12);
        }
    }

    #[test]
    fn param_grads_accumulate_until_reset() {
        let mut p = ParamStore::new();
        let w = p.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&p);
                let n = g.param(w);
                let sq = g.mul(n, n).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap()
            };
            p.accumulate(&grads);
        }
        assert_eq!(p.get(w).grad.as_deref(), Some(&[4.0, -4.0][..]));
        p.zero_grads();
        assert!(p.get(w).grad.is_none());
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut p = ParamStore::new();
        let w = p.insert("w", Tensor::zeros(vec![3])).unwrap();
        p.get_mut(w).grad = Some(vec![3.0, 4.0, 12.0]);
        let before = p.clip_grad_norm(5.0);
        assert_eq!(before, 13.0);
        let g = p.get(w).grad.clone().unwrap();
        assert!((p.grad_norm() - 5.0).abs() < 1e-12);
        for (a, b) in g.iter().zip([3.0, 4.0, 12.0]) {
            assert!((a / b - 5.0 / 13.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_model_has_zero_check_error() {
        let mut p = ParamStore::new();
        let w = p.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let report = gradient_check(
            |g| {
                let n = g.param(w);
                Ok::<_, TensorError>(g.sum(n))
            },
            &mut p,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn replay_reproduces_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        let w = p.insert_uniform("w", vec![3, 4], 1.0, &mut rng).unwrap();
        let mut g = Graph::new(&p);
        let x = g.row(vec![0.1, 0.2, -0.3]).unwrap();
        let wn = g.param(w);
        let h = g.matmul(x, wn).unwrap();
        let t = g.tanh(h);
        let s = g.softmax(t);
        let l = g.log(s);
        let _ = g.sum(l);
        let replayed = g.replay();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v.as_slice(), g.value(NodeId(i)));
        }
    }
}
