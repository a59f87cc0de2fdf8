//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward evaluation.
//! Values are computed eagerly when an op is pushed; [`Tape::backward`] then
//! walks the record once in reverse, accumulating adjoints into the inputs
//! and finally into the [`ParamStore`] slots referenced by parameter leaves.
//!
//! Parameter leaves borrow their value from the store instead of copying it,
//! so a tape is cheap to build per sample.

use super::param::{ParamId, ParamStore};
use super::tensor::{self, gelu, gelu_grad, sigmoid, softplus, Tensor, LN_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    Standardize(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Outer(NodeId, NodeId),
    Index(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Standardize(_) => "standardize",
            Op::MeanRows(_) => "mean_rows",
            Op::SumAll(_) => "sum_all",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Outer(..) => "outer",
            Op::Index(..) => "index",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddScalar(a, b)
            | Op::MulScalar(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Softplus(a)
            | Op::SoftmaxRows(a)
            | Op::Standardize(a)
            | Op::MeanRows(a)
            | Op::SumAll(a)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::Index(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

/// Append-only record of executed operations.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Dense per-parameter gradients, zero for parameters the output does not reach.
    pub fn into_dense(self, store: &ParamStore) -> Vec<Tensor> {
        self.params
            .into_iter()
            .zip(store.iter())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[])),
    }
}

fn colsum(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn compute(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let scalar = |s: &Tensor| {
        if s.len() != 1 {
            Err(Error::shape(name, s.shape(), &[1, 1]))
        } else {
            Ok(s.item())
        }
    };
    Ok(match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are not computed"),
        Op::MatMul(..) => ins[0].matmul(ins[1])?,
        Op::MatMulT(..) => ins[0].matmul_t(ins[1])?,
        Op::Transpose(_) => ins[0].transpose()?,
        Op::Add(..) => ins[0].zip_map(ins[1], name, |a, b| a + b)?,
        Op::Sub(..) => ins[0].zip_map(ins[1], name, |a, b| a - b)?,
        Op::Mul(..) => ins[0].zip_map(ins[1], name, |a, b| a * b)?,
        Op::AddRow(..) | Op::MulRow(..) => {
            let (a, r) = (ins[0], ins[1]);
            let (_, c) = rank2(a, name)?;
            if r.shape() != [1, c] {
                return Err(Error::shape(name, a.shape(), r.shape()));
            }
            let mut out = a.clone();
            let add = matches!(op, Op::AddRow(..));
            for row in out.data_mut().chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(r.data()) {
                    if add {
                        *v += b;
                    } else {
                        *v *= b;
                    }
                }
            }
            out
        }
        Op::Scale(_, s) => ins[0].map(|v| v * s),
        Op::AddScalar(..) => {
            let s = scalar(ins[1])?;
            ins[0].map(|v| v + s)
        }
        Op::MulScalar(..) => {
            let s = scalar(ins[1])?;
            ins[0].map(|v| v * s)
        }
        Op::Sigmoid(_) => ins[0].map(sigmoid),
        Op::LogSigmoid(_) => ins[0].map(|v| -softplus(-v)),
        Op::Tanh(_) => ins[0].map(f64::tanh),
        Op::Gelu(_) => ins[0].map(gelu),
        Op::Softplus(_) => ins[0].map(softplus),
        Op::SoftmaxRows(_) => ins[0].softmax_rows(),
        Op::Standardize(_) => {
            if ins[0].cols() < 2 {
                return Err(Error::shape(name, ins[0].shape(), &[2]));
            }
            ins[0].standardize_rows()
        }
        Op::MeanRows(_) => {
            let (r, _) = rank2(ins[0], name)?;
            let mut m = colsum(ins[0]);
            m.scale_assign(1.0 / r as f64);
            m
        }
        Op::SumAll(_) => Tensor::scalar(ins[0].sum()),
        Op::SliceCols(_, start, len) => {
            let (r, c) = rank2(ins[0], name)?;
            if *len == 0 || start + len > c {
                return Err(Error::shape(name, ins[0].shape(), &[*start, *len]));
            }
            let mut data = Vec::with_capacity(r * len);
            for row in ins[0].data().chunks(c) {
                data.extend_from_slice(&row[*start..start + len]);
            }
            Tensor::new(vec![r, *len], data)?
        }
        Op::SliceRows(_, start, len) => {
            let (r, c) = rank2(ins[0], name)?;
            if *len == 0 || start + len > r {
                return Err(Error::shape(name, ins[0].shape(), &[*start, *len]));
            }
            Tensor::new(vec![*len, c], ins[0].data()[start * c..(start + len) * c].to_vec())?
        }
        Op::ConcatCols(_) => {
            let (r, _) = rank2(ins[0], name)?;
            let mut total = 0;
            for t in ins {
                let (tr, tc) = rank2(t, name)?;
                if tr != r {
                    return Err(Error::shape(name, ins[0].shape(), t.shape()));
                }
                total += tc;
            }
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in ins {
                    data.extend_from_slice(t.row_slice(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        }
        Op::ConcatRows(_) => {
            let (_, c) = rank2(ins[0], name)?;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in ins {
                let (tr, tc) = rank2(t, name)?;
                if tc != c {
                    return Err(Error::shape(name, ins[0].shape(), t.shape()));
                }
                rows += tr;
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c], data)?
        }
        Op::Outer(..) => {
            let (a, b) = (ins[0], ins[1]);
            if a.rows() != 1 || b.rows() != 1 {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let mut data = Vec::with_capacity(a.len() * b.len());
            for &x in a.data() {
                data.extend(b.data().iter().map(|&y| x * y));
            }
            Tensor::new(vec![a.len(), b.len()], data)?
        }
        Op::Index(_, i) => {
            let v = ins[0]
                .data()
                .get(*i)
                .ok_or_else(|| Error::shape(name, ins[0].shape(), &[*i]))?;
            Tensor::scalar(*v)
        }
    })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.params.value(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-leaf without value"),
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = {
            let ids = op.inputs();
            let ins: Vec<&Tensor> = ids.iter().map(|&i| self.value(i)).collect();
            compute(&op, &ins)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::MulScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization without the affine part.
    pub fn standardize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Standardize(a))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", &[], &[]));
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", &[], &[]));
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Outer product of two row vectors.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Outer(a, b))
    }

    /// Element `i` (row-major) as a `1×1` tensor.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.push(Op::Index(a, i))
    }

    /// Recomputes every non-leaf value from the recorded ops.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input | Op::Param(_) => self.value(NodeId(i)).clone(),
                op => {
                    let ids = op.inputs();
                    let ins: Vec<&Tensor> = ids.iter().map(|id| &vals[id.0]).collect();
                    compute(op, &ins)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Seeds `d/d output = 1` for a scalar node and propagates.
    pub fn backward_scalar(&self, out: NodeId) -> Result<Gradients> {
        let shape = self.value(out).shape().to_vec();
        self.backward(&[(out, Tensor::ones(&shape))])
    }

    /// Reverse sweep from arbitrary seeded adjoints.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        for (id, g) in seeds {
            if g.shape() != self.value(*id).shape() {
                return Err(Error::shape("backward seed", self.value(*id).shape(), g.shape()));
            }
            accumulate(&mut adj[id.0], g.clone());
        }
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = self.value(NodeId(i));
            match &node.op {
                Op::Input => {
                    adj[i] = Some(g);
                }
                Op::Param(p) => {
                    accumulate(&mut params[p.0], g.clone());
                    adj[i] = Some(g);
                }
                op => {
                    for (input, grad) in self.local_grads(op, out, &g)? {
                        accumulate(&mut adj[input.0], grad);
                    }
                    adj[i] = Some(g);
                }
            }
        }
        Ok(Gradients { params, nodes: adj })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: &NodeId| self.value(*id);
        Ok(match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(v(b))?), (*b, v(a).t_matmul(g)?)],
            Op::MatMulT(a, b) => vec![(*a, g.matmul(v(b))?), (*b, g.t_matmul(v(a))?)],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(v(b), "mul", |x, y| x * y)?),
                (*b, g.zip_map(v(a), "mul", |x, y| x * y)?),
            ],
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, colsum(g))],
            Op::MulRow(a, r) => {
                let c = g.cols();
                let row = v(r).data();
                let mut ga = g.clone();
                for chunk in ga.data_mut().chunks_mut(c) {
                    for (x, s) in chunk.iter_mut().zip(row) {
                        *x *= s;
                    }
                }
                let gr = colsum(&g.zip_map(v(a), "mul_row", |x, y| x * y)?);
                vec![(*a, ga), (*r, gr)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddScalar(a, s) => vec![(*a, g.clone()), (*s, Tensor::scalar(g.sum()))],
            Op::MulScalar(a, s) => {
                let sv = v(s).item();
                let gs: f64 = g.data().iter().zip(v(a).data()).map(|(x, y)| x * y).sum();
                vec![(*a, g.map(|x| x * sv)), (*s, Tensor::scalar(gs))]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, "sigmoid", |x, y| x * y * (1.0 - y))?)],
            Op::LogSigmoid(a) => vec![(*a, g.zip_map(v(a), "log_sigmoid", |x, z| x * sigmoid(-z))?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(out, "tanh", |x, y| x * (1.0 - y * y))?)],
            Op::Gelu(a) => vec![(*a, g.zip_map(v(a), "gelu", |x, z| x * gelu_grad(z))?)],
            Op::Softplus(a) => vec![(*a, g.zip_map(v(a), "softplus", |x, z| x * sigmoid(z))?)],
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (x, y) in grow.iter_mut().zip(yrow) {
                        *x = y * (*x - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Standardize(a) => {
                let x = v(a);
                let c = x.cols();
                let n = c as f64;
                let mut ga = g.clone();
                for ((grow, xrow), yrow) in ga.data_mut().chunks_mut(c).zip(x.data().chunks(c)).zip(out.data().chunks(c)) {
                    let (_, var) = tensor::mean_var(xrow);
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gmean = grow.iter().sum::<f64>() / n;
                    let gy = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / n;
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - gmean - y * gy);
                    }
                }
                vec![(*a, ga)]
            }
            Op::MeanRows(a) => {
                let x = v(a);
                let r = x.rows();
                let scaled = g.map(|q| q / r as f64);
                let mut data = Vec::with_capacity(x.len());
                for _ in 0..r {
                    data.extend_from_slice(scaled.data());
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::SumAll(a) => vec![(*a, Tensor::filled(v(a).shape(), g.item()))],
            Op::SliceCols(a, start, len) => {
                let x = v(a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                for (dst, src) in ga.data_mut().chunks_mut(c).zip(g.data().chunks(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                vec![(*a, ga)]
            }
            Op::SliceRows(a, start, len) => {
                let x = v(a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.shape());
                ga.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![(*a, ga)]
            }
            Op::ConcatCols(parts) => {
                let c = g.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pc = v(p).cols();
                    let mut data = Vec::with_capacity(v(p).len());
                    for grow in g.data().chunks(c) {
                        data.extend_from_slice(&grow[offset..offset + pc]);
                    }
                    res.push((*p, Tensor::new(v(p).shape().to_vec(), data)?));
                    offset += pc;
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let n = v(p).len();
                    let data = g.data()[offset..offset + n].to_vec();
                    res.push((*p, Tensor::new(v(p).shape().to_vec(), data)?));
                    offset += n;
                }
                res
            }
            Op::Outer(a, b) => {
                let (av, bv) = (v(a), v(b));
                let m = bv.len();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; m];
                for (i, grow) in g.data().chunks(m).enumerate() {
                    let ai = av.data()[i];
                    for (j, &gij) in grow.iter().enumerate() {
                        ga[i] += gij * bv.data()[j];
                        gb[j] += gij * ai;
                    }
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Index(a, i) => {
                let mut ga = Tensor::zeros(v(a).shape());
                ga.data_mut()[*i] = g.item();
                vec![(*a, ga)]
            }
        })
    }
}
