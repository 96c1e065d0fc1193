use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use crate::{ParamId, ParamStore, Result, Scalar, SegmentIndex, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, S),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    SelectRows(Vec<bool>, NodeId, NodeId),
    SegmentSum(NodeId, SegmentIndex),
    SegmentMax(NodeId, Vec<usize>),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    SegmentSoftmax(NodeId, SegmentIndex),
    SegmentLogSoftmax(NodeId, SegmentIndex),
    Unfold(NodeId, usize),
    RowSum(NodeId),
    Sum(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Arc<Tensor<S>>,
    requires_grad: bool,
}

/// Define-by-run computation record. Build one per minibatch or request.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, NodeId>,
}

fn mismatch(op: &'static str, lhs: &Tensor<impl Scalar>, rhs: &Tensor<impl Scalar>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn v(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<S>) -> Vec<NodeId> {
        use Op::*;
        match op {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            SelectRows(_, a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Sigmoid(a) | Tanh(a) | Relu(a) | Exp(a) | Log(a)
            | SliceCols(a, _) | GatherRows(a, _) | SegmentSum(a, _) | SegmentMax(a, _)
            | MeanRows(a) | SoftmaxRows(a) | SegmentSoftmax(a, _) | SegmentLogSoftmax(a, _)
            | Unfold(a, _) | RowSum(a) | Sum(a) => vec![*a],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
            LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
        }
    }

    fn leaf(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.leaf(Arc::new(value), false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.leaf(Arc::new(value), true)
    }

    /// Inserts a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.params.get(&id) {
            return Ok(n);
        }
        let n = self.leaf(store.shared(id), true)?;
        self.params.insert(id, n);
        Ok(n)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.v(a), self.v(b));
        if x.cols() != y.rows() {
            return Err(mismatch("matmul", x, y));
        }
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        let mut out = Tensor::zeros(m, n);
        gemm_acc(x.data(), y.data(), out.data_mut(), m, k, n);
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.v(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (x, y) = (self.v(a), self.v(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("sub", a, b, |p, q| p - q)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("mul", a, b, |p, q| p * q)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.v(a), self.v(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out, "add_row")
    }

    /// Scales row `i` of `a` by `col[i]` for an `r x 1` column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (x, c) = (self.v(a), self.v(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(mismatch("mul_col", x, c));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let s = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        self.push(Op::MulCol(a, col), out, "mul_col")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let c = S::from_f64(c);
        let out = self.v(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.v(a).map(|x| {
            if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        });
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.v(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.v(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.v(a).map(|x| x.exp());
        self.push(Op::Exp(a), out, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.v(a).map(|x| x.ln());
        self.push(Op::Log(a), out, "log")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.v(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.v(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.v(*first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.v(p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.v(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.v(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.v(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let x = self.v(a);
        if start + width > x.cols() {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + width,
                bound: x.cols(),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let out = Tensor::new(x.rows(), width, data)?;
        self.push(Op::SliceCols(a, start), out, "slice_cols")
    }

    /// Row `index[i]` of `a` becomes row `i` of the output (embedding lookup).
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let x = self.v(a);
        let mut data = Vec::with_capacity(index.len() * x.cols());
        for &i in index {
            if i >= x.rows() {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: x.rows(),
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(index.len(), x.cols(), data)?;
        self.push(Op::GatherRows(a, index.to_vec()), out, "gather_rows")
    }

    /// Row `i` from `on_true` where `mask[i]`, otherwise from `on_false`.
    pub fn select_rows(&mut self, mask: &[bool], on_true: NodeId, on_false: NodeId) -> Result<NodeId> {
        let (x, y) = (self.v(on_true), self.v(on_false));
        if x.shape() != y.shape() || mask.len() != x.rows() {
            return Err(mismatch("select_rows", x, y));
        }
        let mut out = y.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        self.push(Op::SelectRows(mask.to_vec(), on_true, on_false), out, "select_rows")
    }

    fn check_segments(&self, op: &'static str, x: &Tensor<S>, seg: &SegmentIndex) -> Result<()> {
        if seg.len() != x.rows() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape(),
                rhs: [seg.len(), seg.count()],
            });
        }
        Ok(())
    }

    /// Row `j` of the `m x k` output is the sum of the rows with segment id `j`,
    /// accumulated in row order.
    pub fn segment_sum(&mut self, a: NodeId, seg: &SegmentIndex) -> Result<NodeId> {
        let x = self.v(a);
        self.check_segments("segment_sum", x, seg)?;
        let mut out = Tensor::zeros(seg.count(), x.cols());
        for (r, &s) in seg.ids().iter().enumerate() {
            for (o, &v) in out.row_mut(s).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(Op::SegmentSum(a, seg.clone()), out, "segment_sum")
    }

    /// Elementwise maximum over the rows of each segment; empty segments give
    /// zero rows. Ties resolve to the first row.
    pub fn segment_max(&mut self, a: NodeId, seg: &SegmentIndex) -> Result<NodeId> {
        let x = self.v(a);
        self.check_segments("segment_max", x, seg)?;
        let k = x.cols();
        let mut out = Tensor::zeros(seg.count(), k);
        let mut arg = vec![usize::MAX; seg.count() * k];
        for (r, &s) in seg.ids().iter().enumerate() {
            let row = x.row(r);
            for c in 0..k {
                let slot = s * k + c;
                if arg[slot] == usize::MAX || row[c] > out.data()[slot] {
                    arg[slot] = r;
                    out.data_mut()[slot] = row[c];
                }
            }
        }
        self.push(Op::SegmentMax(a, arg), out, "segment_max")
    }

    /// Elementwise maximum over all rows (`1 x k`).
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let seg = SegmentIndex::single(self.v(a).rows());
        self.segment_max(a, &seg)
    }

    /// Mean over rows (`1 x k`).
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        if x.rows() == 0 {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = S::from_f64(x.rows() as f64);
        out.data_mut().iter_mut().for_each(|o| *o = *o / n);
        self.push(Op::MeanRows(a), out, "mean_rows")
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), out, "softmax_rows")
    }

    fn segment_scores(&self, op: &'static str, a: NodeId, seg: &SegmentIndex) -> Result<(Vec<S>, Vec<Vec<usize>>)> {
        let x = self.v(a);
        if x.cols() != 1 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("scores must be an n x 1 column, got {:?}", x.shape()),
            });
        }
        self.check_segments(op, x, seg)?;
        Ok((x.data().to_vec(), seg.members()))
    }

    /// Max-stabilised softmax of an `n x 1` score column within each segment.
    pub fn segment_softmax(&mut self, a: NodeId, seg: &SegmentIndex) -> Result<NodeId> {
        let (scores, members) = self.segment_scores("segment_softmax", a, seg)?;
        let mut out = vec![S::zero(); scores.len()];
        for rows in members.iter().filter(|m| !m.is_empty()) {
            let mut buf: Vec<S> = rows.iter().map(|&r| scores[r]).collect();
            softmax_in_place(&mut buf);
            for (&r, v) in rows.iter().zip(buf) {
                out[r] = v;
            }
        }
        let out = Tensor::new(scores.len(), 1, out)?;
        self.push(Op::SegmentSoftmax(a, seg.clone()), out, "segment_softmax")
    }

    /// `log` of [`Graph::segment_softmax`], computed without forming the ratio.
    pub fn segment_log_softmax(&mut self, a: NodeId, seg: &SegmentIndex) -> Result<NodeId> {
        let (scores, members) = self.segment_scores("segment_log_softmax", a, seg)?;
        let mut out = vec![S::zero(); scores.len()];
        for rows in members.iter().filter(|m| !m.is_empty()) {
            let max = rows
                .iter()
                .map(|&r| scores[r])
                .fold(S::neg_infinity(), S::max);
            let lse = rows.iter().map(|&r| (scores[r] - max).exp()).sum::<S>().ln() + max;
            for &r in rows {
                out[r] = scores[r] - lse;
            }
        }
        let out = Tensor::new(scores.len(), 1, out)?;
        self.push(Op::SegmentLogSoftmax(a, seg.clone()), out, "segment_log_softmax")
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// row: `L x C -> (L - width + 1) x (width * C)`. A 1D convolution is this
    /// followed by a matmul with a `(width * C) x out` kernel.
    pub fn unfold(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let x = self.v(a);
        if width == 0 || x.rows() < width {
            return Err(TensorError::Invalid {
                op: "unfold",
                msg: format!("window {width} does not fit {} rows", x.rows()),
            });
        }
        let steps = x.rows() - width + 1;
        let c = x.cols();
        let mut data = Vec::with_capacity(steps * width * c);
        for t in 0..steps {
            data.extend_from_slice(&x.data()[t * c..(t + width) * c]);
        }
        let out = Tensor::new(steps, width * c, data)?;
        self.push(Op::Unfold(a, width), out, "unfold")
    }

    /// Sum of each row (`r x 1`).
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        let data = (0..x.rows())
            .map(|r| x.row(r).iter().fold(S::zero(), |acc, &v| acc + v))
            .collect();
        let out = Tensor::new(x.rows(), 1, data)?;
        self.push(Op::RowSum(a), out, "row_sum")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.v(a).sum());
        self.push(Op::Sum(a), out, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.v(a).len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise layer normalisation with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (x, g, b) = (self.v(a), self.v(gain), self.v(bias));
        if g.shape() != [1, x.cols()] || b.shape() != [1, x.cols()] {
            return Err(mismatch("layer_norm", x, g));
        }
        let c = x.cols();
        let n = S::from_f64(c as f64);
        let eps = S::from_f64(eps);
        let mut xhat = Tensor::zeros(x.rows(), c);
        let mut out = Tensor::zeros(x.rows(), c);
        let mut rstd = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.set(r, j, h);
                out.set(r, j, h * g.data()[j] + b.data()[j]);
            }
        }
        let op = Op::LayerNorm {
            input: a,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(op, out, "layer_norm")
    }

    /// Reverse pass from a `1 x 1` loss. Returns gradients of every leaf that
    /// requires one (parameters and [`Graph::input`] nodes).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let shape = self.v(loss).shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        let params = self.params.iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<S>>], id: NodeId) -> Option<&'a mut Tensor<S>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let [r, c] = node.value.shape();
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backprop(&self, op: &Op<S>, y: &Tensor<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.v(*a), self.v(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                if let Some(da) = self.slot(grads, *a) {
                    gemm_bt_acc(g.data(), w.data(), da.data_mut(), m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_at_acc(x.data(), g.data(), db.data_mut(), m, k, n);
                }
            }
            Op::Transpose(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(d) = self.slot(grads, id) {
                        d.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, &v) in db.data_mut().iter_mut().zip(g.data()) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, w) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                if let Some(da) = self.slot(grads, *a) {
                    zip_acc(da, g, &w, |gv, wv| gv * wv);
                }
                if let Some(db) = self.slot(grads, *b) {
                    zip_acc(db, g, &x, |gv, xv| gv * xv);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(dr) = self.slot(grads, *row) {
                    for r in 0..g.rows() {
                        for (d, &v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (x, c) = (self.nodes[a.0].value.clone(), self.nodes[col.0].value.clone());
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        let s = c.data()[r];
                        for (d, &v) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += v * s;
                        }
                    }
                }
                if let Some(dc) = self.slot(grads, *col) {
                    for r in 0..g.rows() {
                        let dot = g.row(r).iter().zip(x.row(r)).fold(S::zero(), |acc, (&p, &q)| acc + p * q);
                        dc.data_mut()[r] += dot;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &v) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += v * *c;
                    }
                }
            }
            Op::Sigmoid(a) => self.unary(grads, *a, g, y, |_, yv| yv * (S::one() - yv)),
            Op::Tanh(a) => self.unary(grads, *a, g, y, |_, yv| S::one() - yv * yv),
            Op::Relu(a) => self.unary(grads, *a, g, y, |_, yv| {
                if yv > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            Op::Exp(a) => self.unary(grads, *a, g, y, |_, yv| yv),
            Op::Log(a) => self.unary(grads, *a, g, y, |xv, _| S::one() / xv),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.v(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            for (d, &v) in dp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for &p in parts {
                    let n = self.v(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, &v) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *d += v;
                        }
                    }
                    offset += n;
                    debug_assert_eq!(n % c.max(1), 0);
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (d, &v) in da.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::GatherRows(a, index) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (i, &src) in index.iter().enumerate() {
                        for (d, &v) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SelectRows(mask, t, f) => {
                for (id, want) in [(*t, true), (*f, false)] {
                    if let Some(d) = self.slot(grads, id) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                for (dv, &v) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *dv += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentSum(a, seg) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (r, &s) in seg.ids().iter().enumerate() {
                        for (d, &v) in da.row_mut(r).iter_mut().zip(g.row(s)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SegmentMax(a, arg) => {
                let k = g.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (slot, &r) in arg.iter().enumerate() {
                        if r != usize::MAX {
                            let c = slot % k;
                            let cur = da.get(r, c);
                            da.set(r, c, cur + g.data()[slot]);
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let n = S::from_f64(da.rows() as f64);
                    for r in 0..da.rows() {
                        for (d, &v) in da.row_mut(r).iter_mut().zip(g.data()) {
                            *d += v / n;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot = yr.iter().zip(gr).fold(S::zero(), |acc, (&p, &q)| acc + p * q);
                        for ((d, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if let Some(da) = self.slot(grads, *a) {
                    for rows in seg.members() {
                        let dot = rows.iter().fold(S::zero(), |acc, &r| acc + y.data()[r] * g.data()[r]);
                        for r in rows {
                            da.data_mut()[r] += y.data()[r] * (g.data()[r] - dot);
                        }
                    }
                }
            }
            Op::SegmentLogSoftmax(a, seg) => {
                if let Some(da) = self.slot(grads, *a) {
                    for rows in seg.members() {
                        let total = rows.iter().fold(S::zero(), |acc, &r| acc + g.data()[r]);
                        for r in rows {
                            da.data_mut()[r] += g.data()[r] - y.data()[r].exp() * total;
                        }
                    }
                }
            }
            Op::Unfold(a, width) => {
                if let Some(da) = self.slot(grads, *a) {
                    let c = da.cols();
                    for t in 0..g.rows() {
                        let dst = &mut da.data_mut()[t * c..(t + width) * c];
                        for (d, &v) in dst.iter_mut().zip(g.row(t)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..da.rows() {
                        let v = g.data()[r];
                        da.row_mut(r).iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let v = g.data()[0];
                    da.data_mut().iter_mut().for_each(|d| *d += v);
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gn = self.nodes[gain.0].value.clone();
                let c = xhat.cols();
                let n = S::from_f64(c as f64);
                if let Some(dx) = self.slot(grads, *input) {
                    for r in 0..g.rows() {
                        let dxhat: Vec<S> = g.row(r).iter().zip(gn.data()).map(|(&gv, &w)| gv * w).collect();
                        let s1 = dxhat.iter().copied().sum::<S>();
                        let s2 = dxhat.iter().zip(xhat.row(r)).fold(S::zero(), |acc, (&p, &q)| acc + p * q);
                        for j in 0..c {
                            let v = rstd[r] / n * (n * dxhat[j] - s1 - xhat.get(r, j) * s2);
                            let cur = dx.get(r, j);
                            dx.set(r, j, cur + v);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for r in 0..g.rows() {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for r in 0..g.rows() {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        grads: &mut [Option<Tensor<S>>],
        a: NodeId,
        g: &Tensor<S>,
        y: &Tensor<S>,
        deriv: impl Fn(S, S) -> S,
    ) {
        let x = self.nodes[a.0].value.clone();
        if let Some(da) = self.slot(grads, a) {
            for (((d, &gv), &xv), &yv) in da.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(y.data()) {
                *d += gv * deriv(xv, yv);
            }
        }
    }
}

fn zip_acc<S: Scalar>(d: &mut Tensor<S>, g: &Tensor<S>, other: &Tensor<S>, f: impl Fn(S, S) -> S) {
    for ((dv, &gv), &ov) in d.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *dv += f(gv, ov);
    }
}

fn softmax_in_place<S: Scalar>(xs: &mut [S]) {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<S = f32> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf node; `None` if the loss does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.wrt(*n))
    }

    /// `(parameter, gradient)` pairs sorted by parameter id.
    pub fn into_params(mut self) -> Vec<(ParamId, Tensor<S>)> {
        let mut out: Vec<(ParamId, Tensor<S>)> = self
            .params
            .iter()
            .filter_map(|&(p, n)| self.grads.get_mut(n.0).and_then(|g| g.take()).map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
