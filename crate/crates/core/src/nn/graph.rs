//! Tape-based reverse-mode differentiation over a fixed set of tensor ops.
//!
//! A [`Graph`] borrows the parameter tensors of a model, records every op applied
//! during the forward pass and replays the tape backwards in [`Graph::backward`].
//! Graphs are cheap to build and are meant to live for one forward/backward pass.

use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, sigmoid, softmax_row, MatView};
use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value {
    Param(usize),
    Owned(Vec<f64>),
}

enum Op {
    Leaf,
    Param,
    MatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize, b_transposed: bool },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SplitHeads { x: NodeId, n_seq: usize, seq_len: usize, heads: usize },
    MergeHeads { x: NodeId, n_seq: usize, seq_len: usize, heads: usize },
    Dropout { x: NodeId, mask: Vec<f64> },
    SelectRows { keep: Vec<bool>, a: NodeId, b: NodeId },
    Reshape(NodeId),
    SumAll(NodeId),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

fn rows_of(shape: &[usize]) -> usize {
    match shape.last() {
        Some(&c) if c > 0 => shape.iter().product::<usize>() / c,
        _ => 0,
    }
}

fn last(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NnError {
    NnError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, param_nodes: vec![None; params.len()], nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id.0].value {
            Value::Param(i) => self.params[*i].data(),
            Value::Owned(v) => v,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node value matches its shape")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, value: Value::Owned(data), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf whose gradient is kept (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Node for parameter `index` of the borrowed parameter slice. Repeated calls
    /// return the same node.
    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node {
            shape: self.params[index].shape().to_vec(),
            value: Value::Param(index),
            op: Op::Param,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[index] = Some(id);
        id
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, b_transposed: bool) -> Result<NodeId, NnError> {
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) =
            if b_transposed { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        if k != kb {
            return Err(mismatch(op, &sa, &sb));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        // A 2-D right operand is shared by every matrix of the left operand,
        // which is the same as one matmul on the flattened left rows.
        let (batch, m, mut out_shape) = if sb.len() == 2 {
            (1, batch_a * m, sa[..sa.len() - 1].to_vec())
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (batch_a, m, sa[..sa.len() - 1].to_vec())
        } else {
            return Err(mismatch(op, &sa, &sb));
        };
        out_shape.push(n);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for g in 0..batch {
                let am = MatView::new(&av[g * m * k..(g + 1) * m * k], m, k);
                let bm = if b_transposed {
                    MatView::new(&bv[g * n * k..(g + 1) * n * k], n, k).t()
                } else {
                    MatView::new(&bv[g * k * n..(g + 1) * k * n], k, n)
                };
                gemm(am, bm, &mut out[g * m * n..(g + 1) * m * n], 0.0);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, Op::MatMul { a, b, batch, m, k, n, b_transposed }, rg))
    }

    /// `a · b`. Both operands have equal leading batch dimensions, or `b` is 2-D
    /// and shared across all matrices of `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.matmul_impl(a, b, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let c = last(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self.value(x).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b)).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Softmax over the last axis. `mask`, when given, is added to the logits
    /// before normalization; it holds one row per matrix (the product of all
    /// axes but the last two) and is shared by every row of that matrix.
    /// `-inf` entries receive exactly zero probability.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&[f64]>) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        let c = last(&shape);
        let rows_per_matrix = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let rows = rows_of(&shape);
        let n_mat = if rows_per_matrix == 0 { 0 } else { rows / rows_per_matrix };
        if let Some(m) = mask {
            if m.len() != n_mat * c {
                return Err(mismatch("softmax mask", &shape, &[m.len()]));
            }
        }
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let mrow = mask.map(|m| {
                let g = r / rows_per_matrix;
                &m[g * c..(g + 1) * c]
            });
            softmax_row(row, mrow);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        let c = last(&shape);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(NnError::InvalidArgument("layer_norm eps must be positive"));
        }
        let rows = rows_of(&shape);
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        {
            let xv = self.value(x);
            let gv = self.value(gain);
            let bv = self.value(bias);
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gv[j] + bv[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    /// Rows of a `[vocab × dim]` table, one per id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NnError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("embedding", &shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NnError::IndexOutOfRange { index: bad, len: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean cross-entropy of `[n × classes]` logits against per-row targets.
    /// Rows whose target equals `ignore_index` contribute neither loss nor
    /// gradient. Returns a scalar (shape `[1]`); zero when every row is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<NodeId, NnError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        let targets: Vec<Option<usize>> =
            targets.iter().map(|&t| if Some(t) == ignore_index { None } else { Some(t) }).collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(NnError::IndexOutOfRange { index: *bad, len: c });
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for ((prow, lrow), t) in probs.chunks_mut(c).zip(lv.chunks(c)).zip(&targets) {
            softmax_row(prow, None);
            if let Some(t) = t {
                // log-sum-exp form keeps the loss exact for extreme logits
                let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + lrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - lrow[*t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets, probs, count }, rg))
    }

    /// Selects rows of a 2-D node.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("gather_rows", &shape, &[idx.len()]));
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NnError::IndexOutOfRange { index: bad, len: r });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Columns `start..start + len` of a 2-D node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(mismatch("slice_cols", &shape, &[start, len]));
        }
        let c = shape[1];
        let out: Vec<f64> = self.value(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![shape[0], len], out, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates 2-D nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let first = parts.first().ok_or(NnError::InvalidArgument("concat_cols of nothing"))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `[n_seq·seq_len × heads·dh]` → `[n_seq·heads × seq_len × dh]`.
    pub fn split_heads(&mut self, x: NodeId, n_seq: usize, seq_len: usize, heads: usize) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != n_seq * seq_len || heads == 0 || shape[1] % heads != 0 {
            return Err(mismatch("split_heads", &shape, &[n_seq, seq_len, heads]));
        }
        let dh = shape[1] / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for s in 0..n_seq {
            for t in 0..seq_len {
                for h in 0..heads {
                    let src = (s * seq_len + t) * shape[1] + h * dh;
                    let dst = ((s * heads + h) * seq_len + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n_seq * heads, seq_len, dh], out, Op::SplitHeads { x, n_seq, seq_len, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, n_seq: usize, seq_len: usize, heads: usize) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != n_seq * heads || shape[1] != seq_len {
            return Err(mismatch("merge_heads", &shape, &[n_seq, seq_len, heads]));
        }
        let dh = shape[2];
        let width = heads * dh;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for s in 0..n_seq {
            for t in 0..seq_len {
                for h in 0..heads {
                    let dst = (s * seq_len + t) * width + h * dh;
                    let src = ((s * heads + h) * seq_len + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n_seq * seq_len, width], out, Op::MergeHeads { x, n_seq, seq_len, heads }, rg))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg)
    }

    /// Row-wise choice: row `r` comes from `a` when `keep[r]`, else from `b`.
    pub fn select_rows(&mut self, keep: &[bool], a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.len() != 2 || shape[0] != keep.len() {
            return Err(mismatch("select_rows", &shape, self.shape(b)));
        }
        let c = shape[1];
        let mut out = Vec::with_capacity(shape[0] * c);
        for (r, &k) in keep.iter().enumerate() {
            let src = if k { self.value(a) } else { self.value(b) };
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::SelectRows { keep: keep.to_vec(), a, b }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumAll(x), rg)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::InvalidArgument("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every parameter touched by this graph into `out`
    /// (indexed like the parameter slice).
    pub fn accumulate_param_grads(&self, grads: &Gradients, out: &mut [Vec<f64>]) {
        for (idx, node) in self.param_nodes.iter().enumerate() {
            if let Some(g) = node.and_then(|id| grads.get(id)) {
                for (a, b) in out[idx].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.rg(id) {
            return None;
        }
        let len = self.value(id).len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, batch, m, k, n, b_transposed } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for g in 0..batch {
                        let dc = MatView::new(&dy[g * m * n..(g + 1) * m * n], m, n);
                        let bm = if *b_transposed {
                            MatView::new(&bv[g * n * k..(g + 1) * n * k], n, k)
                        } else {
                            MatView::new(&bv[g * k * n..(g + 1) * k * n], k, n).t()
                        };
                        gemm(dc, bm, &mut ga[g * m * k..(g + 1) * m * k], 1.0);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for g in 0..batch {
                        let dc = MatView::new(&dy[g * m * n..(g + 1) * m * n], m, n);
                        let am = MatView::new(&av[g * m * k..(g + 1) * m * k], m, k);
                        if *b_transposed {
                            gemm(dc.t(), am, &mut gb[g * n * k..(g + 1) * n * k], 1.0);
                        } else {
                            gemm(am.t(), dc, &mut gb[g * k * n..(g + 1) * k * n], 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(g) = self.grad_buf(grads, *id) {
                        g.iter_mut().zip(dy).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(x, d)| *x += d);
                }
                if let Some(g) = self.grad_buf(grads, *bias) {
                    let c = g.len();
                    for row in dy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(x, d)| *x += d * s);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(g) = self.grad_buf(grads, *a) {
                    for ((x, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *x += d * y;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    for ((x, d), y) in g.iter_mut().zip(dy).zip(av) {
                        *x += d * y;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.value(NodeId(i));
                let c = last(&node.shape);
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(dy.chunks(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = last(&node.shape);
                let gv = self.value(*gain);
                if let Some(gg) = self.grad_buf(grads, *gain) {
                    for (hr, dr) in xhat.chunks(c).zip(dy.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for dr in dy.chunks(c) {
                        gb.iter_mut().zip(dr).for_each(|(x, d)| *x += d);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let nf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, (hr, dr)) in xhat.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            dxhat[j] = dr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let is = inv_std[r];
                        let gr = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            gr[j] += is / nf * (nf * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((gx, d), v) in g.iter_mut().zip(dy).zip(xv) {
                        *gx += d * gelu_grad(*v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.value(NodeId(i));
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((gx, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *gx += d * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = self.value(NodeId(i));
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((gx, d), t) in g.iter_mut().zip(dy).zip(y) {
                        *gx += d * (1.0 - t * t);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(g) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let gr = &mut g[id * d..(id + 1) * d];
                        gr.iter_mut().zip(&dy[r * d..(r + 1) * d]).for_each(|(x, v)| *x += v);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let c = self.shape(*logits)[1];
                let scale = dy[0] / *count as f64;
                if let Some(g) = self.grad_buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let pr = &probs[r * c..(r + 1) * c];
                        let gr = &mut g[r * c..(r + 1) * c];
                        for j in 0..c {
                            let ind = if j == *t { 1.0 } else { 0.0 };
                            gr[j] += scale * (pr[j] - ind);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                if let Some(g) = self.grad_buf(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        g[src * c..(src + 1) * c].iter_mut().zip(&dy[r * c..(r + 1) * c]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.shape[1];
                let c = self.shape(*x)[1];
                if let Some(g) = self.grad_buf(grads, *x) {
                    for (gr, dr) in g.chunks_mut(c).zip(dy.chunks(w)) {
                        gr[*start..*start + w].iter_mut().zip(dr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(g) = self.grad_buf(grads, *p) {
                        for (gr, dr) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            gr.iter_mut().zip(&dr[offset..offset + w]).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::SplitHeads { x, n_seq, seq_len, heads } => {
                let dh = node.shape[2];
                let width = heads * dh;
                if let Some(g) = self.grad_buf(grads, *x) {
                    for s in 0..*n_seq {
                        for t in 0..*seq_len {
                            for h in 0..*heads {
                                let dst = (s * seq_len + t) * width + h * dh;
                                let src = ((s * heads + h) * seq_len + t) * dh;
                                g[dst..dst + dh].iter_mut().zip(&dy[src..src + dh]).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, n_seq, seq_len, heads } => {
                let dh = self.shape(*x)[2];
                let width = heads * dh;
                if let Some(g) = self.grad_buf(grads, *x) {
                    for s in 0..*n_seq {
                        for t in 0..*seq_len {
                            for h in 0..*heads {
                                let src = (s * seq_len + t) * width + h * dh;
                                let dst = ((s * heads + h) * seq_len + t) * dh;
                                g[dst..dst + dh].iter_mut().zip(&dy[src..src + dh]).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((gx, d), m) in g.iter_mut().zip(dy).zip(mask) {
                        *gx += d * m;
                    }
                }
            }
            Op::SelectRows { keep, a, b } => {
                let c = node.shape[1];
                for (id, want) in [(a, true), (b, false)] {
                    if let Some(g) = self.grad_buf(grads, *id) {
                        for (r, &k) in keep.iter().enumerate() {
                            if k == want {
                                g[r * c..(r + 1) * c]
                                    .iter_mut()
                                    .zip(&dy[r * c..(r + 1) * c])
                                    .for_each(|(x, d)| *x += d);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().for_each(|a| *a += dy[0]);
                }
            }
        }
    }
}
