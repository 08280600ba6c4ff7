//! Reverse-mode differentiation tape.
//!
//! A [`GradGraph`] records every operation in creation order, which is a
//! topological order by construction: an op can only reference nodes that
//! already exist, so cycles are impossible. [`GradGraph::backward`] walks the
//! records once in reverse, accumulating gradients; a leaf used several times
//! receives the sum of its contributions.
//!
//! The graph is confined to one thread (no internal locking). Values read
//! back out of it are plain [`Tensor`]s.

use std::collections::HashMap;

use super::{BoolMat, Tensor, TensorError};

/// Handle to a node in one specific [`GradGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Node, b: Node },
    Add { a: Node, b: Node },
    Sub { a: Node, b: Node },
    Scale { x: Node, factor: f64 },
    AddRow { x: Node, row: Node },
    Concat { parts: Vec<Node>, axis: usize },
    GatherRows { x: Node, indices: Vec<usize> },
    Slice { x: Node, axis: usize, start: usize, end: usize },
    Transpose { x: Node },
    Reshape { x: Node },
    Sum { x: Node },
    Mean { x: Node },
    LeakyRelu { x: Node, slope: f64 },
    Square { x: Node },
    MaskedFill { x: Node, masked: Vec<bool> },
    SoftmaxRows { x: Node },
    LayerNorm { x: Node, gain: Node, offset: Node, normalized: Vec<f64>, inv_sigma: Vec<f64> },
    L2NormRows { x: Node, norms: Vec<f64> },
}

struct NodeRecord {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation with per-node values and, after [`backward`], per-node
/// gradients.
///
/// [`backward`]: GradGraph::backward
#[derive(Default)]
pub struct GradGraph {
    records: Vec<NodeRecord>,
    bound: HashMap<usize, Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl GradGraph {
    pub fn new() -> Self {
        Self {
            records: Vec::with_capacity(2048),
            bound: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.records[node.0].value
    }

    /// Gradient of the backward root w.r.t. this node, if backward has run
    /// and the node participates in differentiation.
    pub fn grad(&self, node: Node) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Node {
        debug_assert!(
            value.all_finite(),
            "non-finite values produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.records.push(NodeRecord { value, op, needs_grad });
        Node(self.records.len() - 1)
    }

    fn needs(&self, node: Node) -> bool {
        self.records[node.0].needs_grad
    }

    // ── Inputs ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Node {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Node {
        self.leaf(value, false)
    }

    /// Keyed differentiable leaf. Binding the same key again returns the
    /// node created first, so gradients from every use accumulate in one
    /// place; used for model parameters.
    pub fn bind(&mut self, key: usize, value: &Tensor) -> Node {
        if let Some(&node) = self.bound.get(&key) {
            return node;
        }
        let node = self.leaf(value.clone(), true);
        self.bound.insert(key, node);
        node
    }

    /// Gradient for a bound key, if any.
    pub fn bound_grad(&self, key: usize) -> Option<&Tensor> {
        self.bound.get(&key).and_then(|&n| self.grad(n))
    }

    /// All (key, gradient) pairs, ordered by key.
    pub fn bound_grads(&self) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&k, &n)| self.grad(n).map(|g| (k, g.clone())))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    // ── Ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "matmul", shape: ta.shape().to_vec() });
        }
        if !tb.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "matmul", shape: tb.shape().to_vec() });
        }
        if ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, needs))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    pub fn scale(&mut self, x: Node, factor: f64) -> Node {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("scale preserves shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// Broadcast-add a row vector `[n]` to every row of `[m, n]`.
    pub fn add_row(&mut self, x: Node, row: Node) -> Result<Node, TensorError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "add_row", shape: tx.shape().to_vec() });
        }
        if tr.shape() != [tx.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(tx.data()[r * n + c] + tr.data()[c]);
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow { x, row }, needs))
    }

    /// Concatenate matrices along `axis` (0 = stack rows, 1 = stack columns).
    pub fn concat(&mut self, parts: &[Node], axis: usize) -> Result<Node, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        if axis > 1 {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: self.value(parts[0]).shape().to_vec(),
            });
        }
        for &p in parts {
            if !self.value(p).is_matrix() {
                return Err(TensorError::NotAMatrix {
                    op: "concat",
                    shape: self.value(p).shape().to_vec(),
                });
            }
        }
        let first = self.value(parts[0]);
        let (r0, c0) = (first.rows(), first.cols());
        let value = if axis == 0 {
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let t = self.value(p);
                if t.cols() != c0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let mut cols = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows() != r0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: t.shape().to_vec(),
                    });
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    let t = self.value(p);
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    /// Select rows by index (duplicates allowed); gradient scatters back.
    pub fn gather_rows(&mut self, x: Node, indices: &[usize]) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "gather_rows", shape: tx.shape().to_vec() });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::RowOutOfBounds { op: "gather_rows", index: i, rows: m });
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![indices.len(), n], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherRows { x, indices: indices.to_vec() }, needs))
    }

    /// Contiguous sub-matrix along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, x: Node, axis: usize, start: usize, end: usize) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "slice", shape: tx.shape().to_vec() });
        }
        if axis > 1 {
            return Err(TensorError::BadAxis { op: "slice", axis, shape: tx.shape().to_vec() });
        }
        let extent = tx.shape()[axis];
        if start >= end || end > extent {
            return Err(TensorError::BadRange { op: "slice", start, end, extent });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let value = if axis == 0 {
            Tensor::new(vec![end - start, n], tx.data()[start * n..end * n].to_vec())?
        } else {
            let mut data = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                data.extend_from_slice(&tx.row(r)[start..end]);
            }
            Tensor::new(vec![m, end - start], data)?
        };
        let needs = self.needs(x);
        Ok(self.push(value, Op::Slice { x, axis, start, end }, needs))
    }

    pub fn transpose(&mut self, x: Node) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "transpose", shape: tx.shape().to_vec() });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = tx.data()[r * n + c];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose { x }, needs))
    }

    pub fn reshape(&mut self, x: Node, shape: Vec<usize>) -> Result<Node, TensorError> {
        let tx = self.value(x);
        let expected: usize = shape.iter().product();
        if expected != tx.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: tx.len(),
            });
        }
        let value = Tensor::new(shape, tx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Sum of all elements, as a shape-`[1]` scalar.
    pub fn sum(&mut self, x: Node) -> Node {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// Mean of all elements, as a shape-`[1]` scalar.
    pub fn mean(&mut self, x: Node) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let v = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Mean { x }, needs))
    }

    /// Elementwise leaky ReLU. The subgradient at exactly 0 is the
    /// negative-side slope.
    pub fn leaky_relu(&mut self, x: Node, slope: f64) -> Node {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    /// Elementwise square.
    pub fn square(&mut self, x: Node) -> Node {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::Square { x }, needs)
    }

    /// Replace masked positions of a matrix with `fill`. Masked positions get
    /// zero gradient. The mask broadcasts over dims of extent 1.
    pub fn masked_fill(&mut self, x: Node, mask: &BoolMat, fill: f64) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "masked_fill", shape: tx.shape().to_vec() });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let masked = mask.broadcast_to(m, n)?;
        let data = tx
            .data()
            .iter()
            .zip(&masked)
            .map(|(&v, &is_masked)| if is_masked { fill } else { v })
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaskedFill { x, masked }, needs))
    }

    /// Row-wise softmax with max-shift for stability.
    pub fn softmax_rows(&mut self, x: Node) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "softmax_rows", shape: tx.shape().to_vec() });
        }
        let (m, n) = (tx.rows(), tx.cols());
        if m == 0 || n == 0 {
            return Err(TensorError::Empty { op: "softmax_rows" });
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = tx.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let base = data.len();
            for &v in row {
                let e = (v - max).exp();
                data.push(e);
                sum += e;
            }
            for v in &mut data[base..] {
                *v /= sum;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows { x }, needs))
    }

    /// Row-wise layer normalization with learned gain and offset.
    pub fn layer_norm(
        &mut self,
        x: Node,
        gain: Node,
        offset: Node,
        epsilon: f64,
    ) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "layer_norm", shape: tx.shape().to_vec() });
        }
        let (m, n) = (tx.rows(), tx.cols());
        if n == 0 {
            return Err(TensorError::Empty { op: "layer_norm" });
        }
        let (tg, to) = (self.value(gain), self.value(offset));
        if tg.shape() != [n] || to.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: tg.shape().to_vec(),
            });
        }
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_sigma = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_sigma.push(inv);
            for c in 0..n {
                let xh = (row[c] - mu) * inv;
                normalized.push(xh);
                data.push(self.records[gain.0].value.data()[c] * xh
                    + self.records[offset.0].value.data()[c]);
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(offset);
        Ok(self.push(
            value,
            Op::LayerNorm { x, gain, offset, normalized, inv_sigma },
            needs,
        ))
    }

    /// Euclidean norm of each row, as a shape-`[m]` vector. The subgradient
    /// at a zero row is zero.
    pub fn l2_norm_rows(&mut self, x: Node) -> Result<Node, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotAMatrix { op: "l2_norm_rows", shape: tx.shape().to_vec() });
        }
        let m = tx.rows();
        let norms: Vec<f64> = (0..m)
            .map(|r| tx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![m], norms.clone())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::L2NormRows { x, norms }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Visits each node exactly once and
    /// accumulates gradients for every node with `needs_grad`. Calling it a
    /// second time on the same graph is an error.
    pub fn backward(&mut self, root: Node) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let root_value = &self.records[root.0].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.records.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::filled(root_value.shape().to_vec(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.records[i].needs_grad {
                continue;
            }
            let Some(up) = self.grads[i].take() else { continue };
            self.accumulate_inputs(i, &up);
            self.grads[i] = Some(up);
        }
        Ok(())
    }

    fn accumulate_inputs(&mut self, index: usize, up: &Tensor) {
        // Grab the record immutably; all writes go through `add_grad`, which
        // touches only `self.grads`.
        let GradGraph { records, grads, .. } = self;
        let rec = &records[index];
        let needs = |n: Node| records[n.0].needs_grad;
        let value_of = |n: Node| &records[n.0].value;
        let mut add_grad = |n: Node, contribution: Tensor| {
            let slot = &mut grads[n.0];
            match slot {
                Some(existing) => {
                    for (dst, src) in existing.data_mut().iter_mut().zip(contribution.data()) {
                        *dst += src;
                    }
                }
                None => *slot = Some(contribution),
            }
        };

        match &rec.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (value_of(*a), value_of(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += up.data()[i * n + j] * tb.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    add_grad(*a, Tensor::new(vec![m, k], da).expect("grad shape"));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    // dB = A^T · dC
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * up.data()[i * n + j];
                            }
                        }
                    }
                    add_grad(*b, Tensor::new(vec![k, n], db).expect("grad shape"));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    add_grad(*a, up.clone());
                }
                if needs(*b) {
                    add_grad(*b, up.clone());
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    add_grad(*a, up.clone());
                }
                if needs(*b) {
                    let data = up.data().iter().map(|v| -v).collect();
                    add_grad(*b, Tensor::new(up.shape().to_vec(), data).expect("grad shape"));
                }
            }
            Op::Scale { x, factor } => {
                if needs(*x) {
                    let data = up.data().iter().map(|v| v * factor).collect();
                    add_grad(*x, Tensor::new(up.shape().to_vec(), data).expect("grad shape"));
                }
            }
            Op::AddRow { x, row } => {
                if needs(*x) {
                    add_grad(*x, up.clone());
                }
                if needs(*row) {
                    let (m, n) = (up.rows(), up.cols());
                    let mut dr = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dr[c] += up.data()[r * n + c];
                        }
                    }
                    add_grad(*row, Tensor::new(vec![n], dr).expect("grad shape"));
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let t = value_of(p);
                        let rows = t.rows();
                        let n = t.cols();
                        if needs(p) {
                            let data = up.data()[offset * n..(offset + rows) * n].to_vec();
                            add_grad(p, Tensor::new(vec![rows, n], data).expect("grad shape"));
                        }
                        offset += rows;
                    }
                } else {
                    let total_cols = up.cols();
                    let rows = up.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let cols = value_of(p).cols();
                        if needs(p) {
                            let mut data = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                let row = &up.data()[r * total_cols..(r + 1) * total_cols];
                                data.extend_from_slice(&row[offset..offset + cols]);
                            }
                            add_grad(p, Tensor::new(vec![rows, cols], data).expect("grad shape"));
                        }
                        offset += cols;
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; m * n];
                    for (out_row, &src_row) in indices.iter().enumerate() {
                        for c in 0..n {
                            dx[src_row * n + c] += up.data()[out_row * n + c];
                        }
                    }
                    add_grad(*x, Tensor::new(vec![m, n], dx).expect("grad shape"));
                }
            }
            Op::Slice { x, axis, start, end } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; m * n];
                    if *axis == 0 {
                        dx[start * n..end * n].copy_from_slice(up.data());
                    } else {
                        let w = end - start;
                        for r in 0..m {
                            for c in 0..w {
                                dx[r * n + start + c] = up.data()[r * w + c];
                            }
                        }
                    }
                    add_grad(*x, Tensor::new(vec![m, n], dx).expect("grad shape"));
                }
            }
            Op::Transpose { x } => {
                if needs(*x) {
                    let (m, n) = (up.rows(), up.cols());
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            dx[c * m + r] = up.data()[r * n + c];
                        }
                    }
                    add_grad(*x, Tensor::new(vec![n, m], dx).expect("grad shape"));
                }
            }
            Op::Reshape { x } => {
                if needs(*x) {
                    let shape = value_of(*x).shape().to_vec();
                    add_grad(*x, Tensor::new(shape, up.data().to_vec()).expect("grad shape"));
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    add_grad(*x, Tensor::filled(tx.shape().to_vec(), up.scalar_value()));
                }
            }
            Op::Mean { x } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    let v = up.scalar_value() / tx.len() as f64;
                    add_grad(*x, Tensor::filled(tx.shape().to_vec(), v));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    let data = tx
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &u)| if v > 0.0 { u } else { slope * u })
                        .collect();
                    add_grad(*x, Tensor::new(tx.shape().to_vec(), data).expect("grad shape"));
                }
            }
            Op::Square { x } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    let data = tx
                        .data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &u)| 2.0 * v * u)
                        .collect();
                    add_grad(*x, Tensor::new(tx.shape().to_vec(), data).expect("grad shape"));
                }
            }
            Op::MaskedFill { x, masked } => {
                if needs(*x) {
                    let data = up
                        .data()
                        .iter()
                        .zip(masked)
                        .map(|(&u, &is_masked)| if is_masked { 0.0 } else { u })
                        .collect();
                    add_grad(*x, Tensor::new(up.shape().to_vec(), data).expect("grad shape"));
                }
            }
            Op::SoftmaxRows { x } => {
                if needs(*x) {
                    let y = &rec.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = y.row(r);
                        let ur = &up.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = yr[c] * (ur[c] - dot);
                        }
                    }
                    add_grad(*x, Tensor::new(vec![m, n], dx).expect("grad shape"));
                }
            }
            Op::LayerNorm { x, gain, offset, normalized, inv_sigma } => {
                let (m, n) = (up.rows(), up.cols());
                let tg = value_of(*gain);
                if needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += up.data()[r * n + c] * normalized[r * n + c];
                        }
                    }
                    add_grad(*gain, Tensor::new(vec![n], dg).expect("grad shape"));
                }
                if needs(*offset) {
                    let mut doff = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            doff[c] += up.data()[r * n + c];
                        }
                    }
                    add_grad(*offset, Tensor::new(vec![n], doff).expect("grad shape"));
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..n {
                            let dxh = up.data()[r * n + c] * tg.data()[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * normalized[r * n + c];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for c in 0..n {
                            let dxh = up.data()[r * n + c] * tg.data()[c];
                            dx[r * n + c] = inv_sigma[r]
                                * (dxh - mean_dxhat - normalized[r * n + c] * mean_dxhat_xhat);
                        }
                    }
                    add_grad(*x, Tensor::new(vec![m, n], dx).expect("grad shape"));
                }
            }
            Op::L2NormRows { x, norms } => {
                if needs(*x) {
                    let tx = value_of(*x);
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let scale = up.data()[r] / norms[r];
                        for c in 0..n {
                            dx[r * n + c] = scale * tx.data()[r * n + c];
                        }
                    }
                    add_grad(*x, Tensor::new(vec![m, n], dx).expect("grad shape"));
                }
            }
        }
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::NEG_LARGE;
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = GradGraph::new();
        let id = g.constant(Tensor::identity(2));
        let x = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g.matmul(id, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selection_case() {
        let mut g = GradGraph::new();
        let a = g.constant(t(&[vec![1.0, 0.0]]));
        let b = g.constant(t(&[vec![0.0], vec![5.0]]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut g = GradGraph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = GradGraph::new();
        let x = g.constant(t(&[vec![0.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let big = g.constant(t(&[vec![1000.0, 0.0]]));
        let yb = g.softmax_rows(big).unwrap();
        let out = g.value(yb).data();
        assert!(out[0] > 1.0 - 1e-12 && out[0] <= 1.0);
        assert!(out[1] >= 0.0 && out[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = GradGraph::new();
        let x = g.constant(t(&[vec![0.3, -1.2, 2.4], vec![9.0, 9.5, 8.1]]));
        let y = g.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        // Per-row constant shifts leave the output unchanged.
        let shifted = g.constant(t(&[vec![0.3 + 7.0, -1.2 + 7.0, 2.4 + 7.0], vec![
            9.0 - 3.0,
            9.5 - 3.0,
            8.1 - 3.0,
        ]]));
        let ys = g.softmax_rows(shifted).unwrap();
        for i in 0..6 {
            assert!((g.value(y).data()[i] - g.value(ys).data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = GradGraph::new();
        let x = g.constant(t(&[vec![-1.0, 2.0]]));
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn concat_shape_algebra() {
        let mut g = GradGraph::new();
        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0, 4.0]]));
        let y = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        let z = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 4]);
        assert_eq!(g.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = GradGraph::new();
        let x = g.leaf(t(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn masked_fill_examples() {
        let mut g = GradGraph::new();
        let x = g.leaf(t(&[vec![1.0, 2.0]]), true);
        let mask = BoolMat::new(1, 2, vec![false, true]).unwrap();
        let y = g.masked_fill(x, &mask, NEG_LARGE).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert_eq!(g.value(y).data()[1], NEG_LARGE);

        // Softmax after masking all but one entry gives a one-hot row.
        let sm = g.softmax_rows(y).unwrap();
        assert_eq!(g.value(sm).data(), &[1.0, 0.0]);

        // Gradient through the masked entry is exactly zero.
        let s = g.sum(sm);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = GradGraph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = GradGraph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardAlreadyRun)));
    }

    #[test]
    fn repeated_leaf_use_accumulates() {
        let mut g = GradGraph::new();
        let x = g.leaf(t(&[vec![3.0]]), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn bind_returns_same_node_for_same_key() {
        let mut g = GradGraph::new();
        let w = Tensor::scalar(1.5);
        let a = g.bind(7, &w);
        let b = g.bind(7, &w);
        assert_eq!(a, b);
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let mut g = GradGraph::new();
        let x = g.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]), true);
        let picked = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_both_axes() {
        let mut g = GradGraph::new();
        let x = g.leaf(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]), true);
        let r = g.slice(x, 0, 1, 2).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 5.0, 6.0]);
        let c = g.slice(x, 1, 1, 3).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 5.0, 6.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
