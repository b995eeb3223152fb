//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append nodes in evaluation order, so walking the list backwards
//! is a reverse topological traversal and visits every node exactly once. A
//! tape is single-threaded by construction; independent tapes may live on
//! different threads.

use super::{
    log_softmax_pick_kernel, matmul_kernel, relu_scalar, sigmoid, softplus, Tensor, TensorError,
};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    /// mat[r, :] + row for every batch row r.
    AddRow { mat: usize, row: usize },
    /// mat[r, :] * row for every batch row r.
    MulRow { mat: usize, row: usize },
    Relu { a: usize },
    Softplus { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Slice { a: usize, start: usize },
    Reshape { a: usize },
    /// Per-row log softmax(logits)[label]; caches the softmax for backward.
    LogSoftmaxPick {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers an input. Leaves are where [`Tape::backward`] reports
    /// gradients; constants are ordinary leaves whose gradient the caller
    /// ignores.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        NodeId(id)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Matmul { a: a.0, b: b.0 },
        ))
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        mat: NodeId,
        row: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (tm, tr) = (&self.nodes[mat.0].value, &self.nodes[row.0].value);
        let (sm, sr) = (tm.shape(), tr.shape());
        if sm.len() != 2 || sr.len() != 1 || sm[1] != sr[0] {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: sm.to_vec(),
                right: sr.to_vec(),
            });
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let m_row = &tm.data()[r * cols..(r + 1) * cols];
            for (x, y) in m_row.iter().zip(tr.data()) {
                data.push(f(*x, *y));
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            op,
        ))
    }

    /// Adds a length-n vector to every row of a B x n matrix.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        self.row_broadcast(
            "add_row",
            mat,
            row,
            |x, y| x + y,
            Op::AddRow {
                mat: mat.0,
                row: row.0,
            },
        )
    }

    /// Multiplies every row of a B x n matrix elementwise by a length-n vector.
    pub fn mul_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        self.row_broadcast(
            "mul_row",
            mat,
            row,
            |x, y| x * y,
            Op::MulRow {
                mat: mat.0,
                row: row.0,
            },
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, op)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, relu_scalar, Op::Relu { a: a.0 })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus { a: a.0 })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log { a: a.0 })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst { a: a.0 })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum();
        let n = t.len().max(1) as f64;
        self.push(Tensor::scalar(s / n), Op::Mean { a: a.0 })
    }

    /// 1-D slice `[start, start+len)` over the flattened data.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let ta = &self.nodes[a.0].value;
        if start + len > ta.len() {
            return Err(TensorError::SliceOutOfBounds {
                start,
                len,
                size: ta.len(),
            });
        }
        let data = ta.data()[start..start + len].to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![len],
                data,
            },
            Op::Slice { a: a.0, start },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let ta = &self.nodes[a.0].value;
        let expect: usize = shape.iter().product();
        if ta.len() != expect {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                len: ta.len(),
                shape,
            });
        }
        let data = ta.data().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Reshape { a: a.0 }))
    }

    /// Fused, numerically stable log softmax(logits)[label] per batch row.
    /// Returns a length-B vector node.
    pub fn log_softmax_pick(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let t = &self.nodes[logits.0].value;
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax_pick",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let mut picked = Vec::new();
        let probs = log_softmax_pick_kernel(t.data(), rows, cols, labels, &mut picked);
        Ok(self.push(
            Tensor {
                shape: vec![rows],
                data: picked,
            },
            Op::LogSoftmaxPick {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar root. Every node gets an adjoint; leaves not
    /// on a path to the root keep zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let root_t = &self.nodes[root.0].value;
        if !root_t.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: root_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        let mut live = vec![false; self.nodes.len()];
        grads[root.0][0] = 1.0;
        live[root.0] = true;

        for i in (0..=root.0).rev() {
            if !live[i] {
                continue;
            }
            // Split so parents' grad buffers can be written while node i's is read.
            let (before, after) = grads.split_at_mut(i);
            let g = &after[0];
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    accumulate_matmul_nt(&mut before[*a], g, tb.data(), m, n, k);
                    accumulate_matmul_tn(&mut before[*b], ta.data(), g, m, k, n);
                    live[*a] = true;
                    live[*b] = true;
                }
                Op::Add { a, b } => {
                    axpy(&mut before[*a], g, 1.0);
                    axpy(&mut before[*b], g, 1.0);
                    live[*a] = true;
                    live[*b] = true;
                }
                Op::Sub { a, b } => {
                    axpy(&mut before[*a], g, 1.0);
                    axpy(&mut before[*b], g, -1.0);
                    live[*a] = true;
                    live[*b] = true;
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if a == b {
                        // x*x: chain rule contributes 2x.
                        for ((da, &gv), &x) in before[*a].iter_mut().zip(g).zip(ta.data()) {
                            *da += 2.0 * gv * x;
                        }
                    } else {
                        for ((da, &gv), &y) in before[*a].iter_mut().zip(g).zip(tb.data()) {
                            *da += gv * y;
                        }
                        for ((db, &gv), &x) in before[*b].iter_mut().zip(g).zip(ta.data()) {
                            *db += gv * x;
                        }
                    }
                    live[*a] = true;
                    live[*b] = true;
                }
                Op::Div { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for ((da, &gv), &y) in before[*a].iter_mut().zip(g).zip(tb.data()) {
                        *da += gv / y;
                    }
                    for (((db, &gv), &x), &y) in
                        before[*b].iter_mut().zip(g).zip(ta.data()).zip(tb.data())
                    {
                        *db -= gv * x / (y * y);
                    }
                    live[*a] = true;
                    live[*b] = true;
                }
                Op::AddRow { mat, row } => {
                    let cols = self.nodes[*row].value.len();
                    axpy(&mut before[*mat], g, 1.0);
                    let drow = &mut before[*row];
                    for chunk in g.chunks_exact(cols) {
                        for (d, &gv) in drow.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    live[*mat] = true;
                    live[*row] = true;
                }
                Op::MulRow { mat, row } => {
                    let (tm, tr) = (&self.nodes[*mat].value, &self.nodes[*row].value);
                    let cols = tr.len();
                    {
                        let dmat = &mut before[*mat];
                        for (chunk, gchunk) in dmat.chunks_exact_mut(cols).zip(g.chunks_exact(cols))
                        {
                            for ((d, &gv), &rv) in chunk.iter_mut().zip(gchunk).zip(tr.data()) {
                                *d += gv * rv;
                            }
                        }
                    }
                    let drow = &mut before[*row];
                    for (mchunk, gchunk) in
                        tm.data().chunks_exact(cols).zip(g.chunks_exact(cols))
                    {
                        for ((d, &gv), &mv) in drow.iter_mut().zip(gchunk).zip(mchunk) {
                            *d += gv * mv;
                        }
                    }
                    live[*mat] = true;
                    live[*row] = true;
                }
                Op::Relu { a } => {
                    let ta = &self.nodes[*a].value;
                    for ((da, &gv), &x) in before[*a].iter_mut().zip(g).zip(ta.data()) {
                        if x > 0.0 {
                            *da += gv;
                        }
                    }
                    live[*a] = true;
                }
                Op::Softplus { a } => {
                    let ta = &self.nodes[*a].value;
                    for ((da, &gv), &x) in before[*a].iter_mut().zip(g).zip(ta.data()) {
                        *da += gv * sigmoid(x);
                    }
                    live[*a] = true;
                }
                Op::Exp { a } => {
                    let out = &self.nodes[i].value;
                    for ((da, &gv), &e) in before[*a].iter_mut().zip(g).zip(out.data()) {
                        *da += gv * e;
                    }
                    live[*a] = true;
                }
                Op::Log { a } => {
                    let ta = &self.nodes[*a].value;
                    for ((da, &gv), &x) in before[*a].iter_mut().zip(g).zip(ta.data()) {
                        *da += gv / x;
                    }
                    live[*a] = true;
                }
                Op::Scale { a, c } => {
                    axpy(&mut before[*a], g, *c);
                    live[*a] = true;
                }
                Op::AddConst { a } => {
                    axpy(&mut before[*a], g, 1.0);
                    live[*a] = true;
                }
                Op::Sum { a } => {
                    let gv = g[0];
                    for da in before[*a].iter_mut() {
                        *da += gv;
                    }
                    live[*a] = true;
                }
                Op::Mean { a } => {
                    let n = self.nodes[*a].value.len().max(1) as f64;
                    let gv = g[0] / n;
                    for da in before[*a].iter_mut() {
                        *da += gv;
                    }
                    live[*a] = true;
                }
                Op::Slice { a, start } => {
                    let da = &mut before[*a];
                    for (d, &gv) in da[*start..*start + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                    live[*a] = true;
                }
                Op::Reshape { a } => {
                    axpy(&mut before[*a], g, 1.0);
                    live[*a] = true;
                }
                Op::LogSoftmaxPick {
                    logits,
                    labels,
                    probs,
                } => {
                    let cols = self.nodes[*logits].value.shape()[1];
                    let dlogits = &mut before[*logits];
                    for (r, &gv) in g.iter().enumerate() {
                        let p_row = &probs[r * cols..(r + 1) * cols];
                        let d_row = &mut dlogits[r * cols..(r + 1) * cols];
                        for (d, &p) in d_row.iter_mut().zip(p_row) {
                            *d -= gv * p;
                        }
                        d_row[labels[r]] += gv;
                    }
                    live[*logits] = true;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// dst[m,k] += g[m,n] @ b[k,n]^T
fn accumulate_matmul_nt(dst: &mut [f64], g: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let d_row = &mut dst[i * k..(i + 1) * k];
        for (p, d) in d_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *d += acc;
        }
    }
}

/// dst[k,n] += a[m,k]^T @ g[m,n]
fn accumulate_matmul_tn(dst: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let d_row = &mut dst[p * n..(p + 1) * n];
            for (d, &gv) in d_row.iter_mut().zip(g_row) {
                *d += av * gv;
            }
        }
    }
}
