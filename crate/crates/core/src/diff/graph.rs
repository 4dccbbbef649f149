//! Define-by-run reverse-mode tape.
//!
//! Every op is evaluated when it is recorded, so model code can branch on
//! intermediate values (sampled actions, argmax counts). The recorded tape can
//! also be replayed with [`Graph::forward`] after leaf inputs are changed.
//! Replay keeps every branch decision and every constant fixed, which is what
//! finite-difference checks of a frozen episode need.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{dot, matmul_into, matmul_tn_into};
use super::{DiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Param(ParamId),
    GatherParam(ParamId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// adds a 1 × c row to every row of an r × c input
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    Dot(NodeId, NodeId),
    MeanRows(NodeId),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::GatherParam(..) => "gather_param",
            Op::Gather(..) => "gather",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat",
            Op::StackRows(_) => "stack",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Dot(..) => "dot",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
        }
    }
}

/// A computation tape over a read-only parameter store.
///
/// Gradients for parameters are returned from [`Graph::backward`] as
/// [`ParamGrads`] and added to the store by the caller, so a store can be
/// shared by several graphs. Gradients for [`Graph::input`] leaves that
/// require them accumulate in place: calling `backward` twice without
/// [`Graph::zero_input_grads`] adds the second pass on top of the first.
pub struct Graph<'p> {
    store: &'p ParamStore,
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    params: Vec<Option<NodeId>>,
    stale: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            ops: Vec::new(),
            values: Vec::new(),
            params: Vec::new(),
            stale: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.ops[id.0] {
            Op::Param(p) => self.store.get(*p),
            _ => self.values[id.0]
                .as_ref()
                .expect("computed node without a value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op) -> Result<NodeId, DiffError> {
        let node = self.ops.len();
        let value = self.eval(node, &op)?;
        self.ops.push(op);
        self.values.push(Some(value));
        Ok(NodeId(node))
    }

    fn push_leaf(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        id
    }

    /// A leaf whose value can be replaced with [`Graph::set_input`].
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, Some(value))
    }

    /// A leaf that never receives gradient and is never recomputed.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, Some(value))
    }

    /// Value of `id` captured as a constant (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = plain(self.value(id).clone());
        self.constant(v)
    }

    /// The node for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(Some(n)) = self.params.get(id.index()) {
            return *n;
        }
        let n = self.push_leaf(Op::Param(id), None);
        if self.params.len() <= id.index() {
            self.params.resize(id.index() + 1, None);
        }
        self.params[id.index()] = Some(n);
        n
    }

    /// Embedding lookup: rows `ids` of a parameter table.
    pub fn gather_param(&mut self, id: ParamId, ids: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::GatherParam(id, ids.to_vec()))
    }

    /// Row selection from a computed node.
    pub fn gather(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::Gather(src, ids.to_vec()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.push(Op::StackRows(parts.to_vec()))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Exp(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Abs(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Clamp(a, lo, hi))
    }

    /// Inner product of two same-shaped tensors, as a 1 × 1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Dot(a, b))
    }

    /// Column means: r × c → 1 × c.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sum(a))
    }

    /// Replaces the value of an input leaf. The graph must be replayed with
    /// [`Graph::forward`] before it can be differentiated again.
    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<(), DiffError> {
        match self.ops.get(id.0) {
            Some(Op::Input) => {}
            Some(op) => {
                return Err(DiffError::NotAnInput {
                    node: id.0,
                    op: op.name(),
                })
            }
            None => return Err(DiffError::UnknownNode(id.0)),
        }
        let old = self.values[id.0].as_ref().expect("input has value");
        if old.shape() != value.shape() {
            return Err(DiffError::Shape {
                node: id.0,
                op: "input",
                detail: format!("replacement {:?} vs recorded {:?}", value.shape(), old.shape()),
            });
        }
        let requires = old.requires_grad();
        let mut value = value;
        value.set_requires_grad(requires);
        self.values[id.0] = Some(value);
        self.stale = true;
        Ok(())
    }

    /// Recomputes every non-leaf node in recording order and returns the
    /// value of the last node.
    pub fn forward(&mut self) -> Result<&Tensor, DiffError> {
        for node in 0..self.ops.len() {
            if matches!(self.ops[node], Op::Input | Op::Constant | Op::Param(_)) {
                continue;
            }
            let op = self.ops[node].clone();
            let v = self.eval(node, &op)?;
            self.values[node] = Some(v);
        }
        self.stale = false;
        match self.ops.len() {
            0 => Err(DiffError::UnknownNode(0)),
            n => Ok(self.value(NodeId(n - 1))),
        }
    }

    pub fn zero_input_grads(&mut self) {
        for (op, v) in self.ops.iter().zip(self.values.iter_mut()) {
            if matches!(op, Op::Input) {
                if let Some(t) = v.as_mut() {
                    t.zero_grad();
                }
            }
        }
    }

    /// Marks an input leaf as a gradient target.
    pub fn require_grad(&mut self, id: NodeId) {
        if let (Some(Op::Input), Some(Some(t))) = (self.ops.get(id.0), self.values.get_mut(id.0)) {
            t.set_requires_grad(true);
        }
    }

    pub fn input_grad(&self, id: NodeId) -> Option<&[f64]> {
        match self.ops.get(id.0) {
            Some(Op::Input) => self.values[id.0].as_ref().and_then(|t| t.grad()),
            _ => None,
        }
    }

    fn shape_err(node: usize, op: &Op, detail: String) -> DiffError {
        DiffError::Shape {
            node,
            op: op.name(),
            detail,
        }
    }

    fn eval(&self, node: usize, op: &Op) -> Result<Tensor, DiffError> {
        for input in op_inputs(op) {
            if input.0 >= node {
                return Err(DiffError::UnknownNode(input.0));
            }
        }
        let out = match op {
            Op::Input | Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::GatherParam(p, ids) => gather_rows(self.store.get(*p), ids)
                .map_err(|detail| Self::shape_err(node, op, detail))?,
            Op::Gather(src, ids) => gather_rows(self.value(*src), ids)
                .map_err(|detail| Self::shape_err(node, op, detail))?,
            Op::MatMul(a, b) | Op::MatMulT(a, b) => {
                let trans = matches!(op, Op::MatMulT(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.shape();
                let (bk, n) = if trans {
                    (bv.cols(), bv.rows())
                } else {
                    bv.shape()
                };
                if k != bk {
                    return Err(Self::shape_err(
                        node,
                        op,
                        format!("{:?} x {:?}{}", av.shape(), bv.shape(), if trans { "ᵀ" } else { "" }),
                    ));
                }
                let mut out = Tensor::zeros(m, n);
                matmul_into(av.data(), (m, k), bv.data(), n, trans, out.data_mut());
                out
            }
            Op::Transpose(a) => self.value(*a).transpose(),
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if av.shape() != bv.shape() {
                    return Err(Self::shape_err(
                        node,
                        op,
                        format!("{:?} vs {:?}", av.shape(), bv.shape()),
                    ));
                }
                let data = if matches!(op, Op::Add(..)) {
                    av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect()
                } else {
                    av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect()
                };
                Tensor::from_vec(av.rows(), av.cols(), data)?
            }
            Op::AddRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if rv.rows() != 1 || rv.cols() != av.cols() {
                    return Err(Self::shape_err(
                        node,
                        op,
                        format!("row {:?} cannot broadcast over {:?}", rv.shape(), av.shape()),
                    ));
                }
                let mut out = av.clone();
                out.set_requires_grad(false);
                for r in 0..out.rows() {
                    for (o, b) in out.row_slice_mut(r).iter_mut().zip(rv.data()) {
                        *o += b;
                    }
                }
                plain(out)
            }
            Op::Scale(a, s) => map(self.value(*a), |x| x * s),
            Op::ConcatCols(parts) => {
                let first = self.value(*parts.first().ok_or_else(|| {
                    Self::shape_err(node, op, "no parts".into())
                })?);
                let rows = first.rows();
                let mut cols = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.rows() != rows {
                        return Err(Self::shape_err(
                            node,
                            op,
                            format!("row count {} vs {}", v.rows(), rows),
                        ));
                    }
                    cols += v.cols();
                }
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    for p in parts {
                        let v = self.value(*p);
                        out.row_slice_mut(r)[off..off + v.cols()].copy_from_slice(v.row_slice(r));
                        off += v.cols();
                    }
                }
                out
            }
            Op::StackRows(parts) => {
                let first = self.value(*parts.first().ok_or_else(|| {
                    Self::shape_err(node, op, "no parts".into())
                })?);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.cols() != cols {
                        return Err(Self::shape_err(
                            node,
                            op,
                            format!("column count {} vs {}", v.cols(), cols),
                        ));
                    }
                    data.extend_from_slice(v.data());
                    rows += v.rows();
                }
                Tensor::from_vec(rows, cols, data)?
            }
            Op::Softmax(a) => softmax_rows(self.value(*a)),
            Op::LogSoftmax(a) => log_softmax_rows(self.value(*a)),
            Op::Log(a) => map(self.value(*a), f64::ln),
            Op::Exp(a) => map(self.value(*a), f64::exp),
            Op::Relu(a) => map(self.value(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Abs(a) => map(self.value(*a), f64::abs),
            Op::Clamp(a, lo, hi) => map(self.value(*a), |x| x.clamp(*lo, *hi)),
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if av.shape() != bv.shape() {
                    return Err(Self::shape_err(
                        node,
                        op,
                        format!("{:?} vs {:?}", av.shape(), bv.shape()),
                    ));
                }
                Tensor::scalar(dot(av.data(), bv.data()))
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                if av.rows() == 0 {
                    return Err(Self::shape_err(node, op, "mean over zero rows".into()));
                }
                let mut out = vec![0.0; av.cols()];
                for r in 0..av.rows() {
                    for (o, v) in out.iter_mut().zip(av.row_slice(r)) {
                        *o += v;
                    }
                }
                let n = av.rows() as f64;
                out.iter_mut().for_each(|v| *v /= n);
                Tensor::row(out)
            }
            Op::Sum(a) => Tensor::scalar(self.value(*a).data().iter().sum()),
        };
        if !out.is_finite() {
            return Err(DiffError::NonFinite {
                node,
                op: op.name(),
            });
        }
        Ok(out)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: NodeId) -> Result<ParamGrads, DiffError> {
        if self.stale {
            return Err(DiffError::Stale);
        }
        if root.0 >= self.ops.len() {
            return Err(DiffError::UnknownNode(root.0));
        }
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NonScalarRoot { rows, cols });
        }
        let mut grads = ParamGrads::default();
        let needs = self.needs_grad(root);
        if !needs[root.0] {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for node in (0..=root.0).rev() {
            let Some(g) = adj[node].take() else { continue };
            match &self.ops[node] {
                Op::Input => {
                    if let Some(t) = self.values[node].as_mut() {
                        t.accumulate_grad(&g);
                    }
                }
                Op::Constant => {}
                Op::Param(p) => grads.add_dense(*p, g),
                Op::GatherParam(p, ids) => {
                    let cols = self.store.get(*p).cols();
                    for (i, &r) in ids.iter().enumerate() {
                        let buf = grads.row_mut(*p, r, cols);
                        add_into(buf, &g[i * cols..(i + 1) * cols]);
                    }
                }
                Op::Gather(src, ids) => {
                    let (srows, cols) = self.shape(*src);
                    let buf = slot(&mut adj, *src, srows * cols);
                    for (i, &r) in ids.iter().enumerate() {
                        add_into(&mut buf[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    if needs[a.0] {
                        matmul_into(&g, (m, n), bv, k, true, slot(&mut adj, *a, m * k));
                    }
                    if needs[b.0] {
                        matmul_tn_into(av, (m, k), &g, n, slot(&mut adj, *b, k * n));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).0;
                    // C = A·Bᵀ: dA = dC · B ; dB = dCᵀ · A
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    if needs[a.0] {
                        matmul_into(&g, (m, n), bv, k, false, slot(&mut adj, *a, m * k));
                    }
                    if needs[b.0] {
                        matmul_tn_into(&g, (m, n), av, k, slot(&mut adj, *b, n * k));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = self.shape(*a);
                    let da = slot(&mut adj, *a, r * c);
                    // g is c × r
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let n = g.len();
                    if needs[a.0] {
                        add_into(slot(&mut adj, *a, n), &g);
                    }
                    if needs[b.0] {
                        add_into(slot(&mut adj, *b, n), &g);
                    }
                }
                Op::AddRow(a, row) => {
                    let (r, c) = self.shape(*a);
                    if needs[a.0] {
                        add_into(slot(&mut adj, *a, r * c), &g);
                    }
                    if needs[row.0] {
                        let drow = slot(&mut adj, *row, c);
                        for i in 0..r {
                            add_into(drow, &g[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let n = g.len();
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    if needs[a.0] {
                        let da = slot(&mut adj, *a, n);
                        for i in 0..n {
                            da[i] += g[i] * bv[i];
                        }
                    }
                    if needs[b.0] {
                        let db = slot(&mut adj, *b, n);
                        for i in 0..n {
                            db[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let da = slot(&mut adj, *a, g.len());
                    for (d, v) in da.iter_mut().zip(&g) {
                        *d += s * v;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.as_slice();
                    let rows = self.shape(node_id(node)).0;
                    let total = self.shape(node_id(node)).1;
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        if needs[p.0] {
                            let dp = slot(&mut adj, p, rows * c);
                            for r in 0..rows {
                                add_into(&mut dp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                            }
                        }
                        off += c;
                    }
                }
                Op::StackRows(parts) => {
                    let parts = parts.as_slice();
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if needs[p.0] {
                            add_into(slot(&mut adj, p, n), &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(node_id(node));
                    let (r, c) = y.shape();
                    let y = y.data();
                    let da = slot(&mut adj, *a, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            da[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(node_id(node));
                    let (r, c) = y.shape();
                    let y = y.data();
                    let da = slot(&mut adj, *a, r * c);
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            da[i * c + j] += gr[j] - y[i * c + j].exp() * s;
                        }
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let da = slot(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] / x[i];
                    }
                }
                Op::Exp(a) => {
                    let y = self.value(node_id(node)).data();
                    let da = slot(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let da = slot(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    let da = slot(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        } else if x[i] < 0.0 {
                            da[i] -= g[i];
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data();
                    let (lo, hi) = (*lo, *hi);
                    let da = slot(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] >= lo && x[i] <= hi {
                            da[i] += g[i];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    if needs[a.0] {
                        let da = slot(&mut adj, *a, av.len());
                        for i in 0..av.len() {
                            da[i] += s * bv[i];
                        }
                    }
                    if needs[b.0] {
                        let db = slot(&mut adj, *b, bv.len());
                        for i in 0..bv.len() {
                            db[i] += s * av[i];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = 1.0 / r as f64;
                    let da = slot(&mut adj, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j] * inv;
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let s = g[0];
                    slot(&mut adj, *a, n).iter_mut().for_each(|d| *d += s);
                }
            }
        }
        Ok(grads)
    }
}

impl Graph<'_> {
    /// Marks the nodes up to `root` whose gradient reaches a parameter or an
    /// input that requires it.
    fn needs_grad(&self, root: NodeId) -> Vec<bool> {
        let mut needs = vec![false; root.0 + 1];
        for node in 0..=root.0 {
            needs[node] = match &self.ops[node] {
                Op::Constant => false,
                Op::Input => self.values[node].as_ref().is_some_and(|t| t.requires_grad()),
                Op::Param(_) | Op::GatherParam(..) => true,
                op => op_inputs(op).iter().any(|i| needs[i.0]),
            };
        }
        needs
    }
}

fn node_id(i: usize) -> NodeId {
    NodeId(i)
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Constant | Op::Param(_) | Op::GatherParam(..) => Vec::new(),
        Op::Gather(a, _)
        | Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::Clamp(a, ..)
        | Op::MeanRows(a)
        | Op::Sum(a) => vec![*a],
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Mul(a, b)
        | Op::Dot(a, b) => vec![*a, *b],
        Op::ConcatCols(p) | Op::StackRows(p) => p.clone(),
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    adj[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn plain(t: Tensor) -> Tensor {
    let (r, c) = t.shape();
    Tensor::from_vec(r, c, t.into_data()).expect("shape preserved")
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn gather_rows(src: &Tensor, ids: &[usize]) -> Result<Tensor, String> {
    let cols = src.cols();
    let mut data = Vec::with_capacity(ids.len() * cols);
    for &r in ids {
        if r >= src.rows() {
            return Err(format!("row {r} out of range for {} rows", src.rows()));
        }
        data.extend_from_slice(src.row_slice(r));
    }
    Ok(Tensor::from_vec(ids.len(), cols, data).expect("gathered shape"))
}

/// Numerically stable row-wise softmax on a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        softmax_into(t.row_slice(r), out.row_slice_mut(r));
    }
    out
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out.row_slice_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}
