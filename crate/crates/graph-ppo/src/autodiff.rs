//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation applied to its nodes; calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients for every node, including the leaves that hold
//! network parameters. The op set is deliberately small: it is exactly what
//! the graph network forward pass and the clipped-surrogate loss need, and
//! each op's adjoint is checked against central finite differences in the
//! tests below.
//!
//! Shapes are validated when an op is recorded, so a mismatched graph fails
//! fast with [`Error::DimensionMismatch`] instead of producing garbage.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BroadcastScalar(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SegmentSum(NodeId, Vec<usize>),
    SegmentMean(NodeId, Vec<usize>, usize),
    ConcatCols(NodeId, NodeId),
    EdgeMatVec(NodeId, NodeId),
    ClampRows(NodeId, Vec<(f64, f64)>),
    MinElem(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Records a computation as it runs and differentiates it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape of a node as `(rows, cols)`.
    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    /// Forward value of a node, row-major.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` output with respect to a node.
    ///
    /// Empty until [`Tape::backward`] has run.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    /// Records an input matrix. Leaves receive gradients but have no inputs.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::DimensionMismatch {
                expected: ar * ac,
                got: br * bc,
            });
        }
        Ok(())
    }

    /// Elementwise `a + b`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, v, Op::Add(a, b)))
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(r, c, v, Op::Sub(a, b)))
    }

    /// Elementwise `a * b`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(r, c, v, Op::Mul(a, b)))
    }

    /// `a * constant`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x * k).collect();
        Ok(self.push(r, c, v, Op::Scale(a, k)))
    }

    /// Adds a `1 x C` row vector to every row of an `R x C` matrix.
    pub fn add_row_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: br * bc,
            });
        }
        let mut v = self.nodes[a].value.clone();
        for row in 0..r {
            for col in 0..c {
                v[row * c + col] += self.nodes[b].value[col];
            }
        }
        Ok(self.push(r, c, v, Op::AddRowVec(a, b)))
    }

    /// Matrix product of `R x K` and `K x C`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ak) = self.shape(a);
        let (bk, bc) = self.shape(b);
        if ak != bk {
            return Err(Error::DimensionMismatch {
                expected: ak,
                got: bk,
            });
        }
        let mut v = vec![0.0; ar * bc];
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        for i in 0..ar {
            for k in 0..ak {
                let aik = av[i * ak + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * bc..(k + 1) * bc];
                let out = &mut v[i * bc..(i + 1) * bc];
                for (o, bkj) in out.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(self.push(ar, bc, v, Op::MatMul(a, b)))
    }

    /// Elementwise `max(a, 0)`.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(r, c, v, Op::Relu(a)))
    }

    /// Elementwise `exp(a)`.
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x.exp()).collect();
        Ok(self.push(r, c, v, Op::Exp(a)))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.iter().sum();
        Ok(self.push(1, 1, vec![v], Op::Sum(a)))
    }

    /// Mean of all entries, as a `1 x 1` node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len();
        if n == 0 {
            return Err(Error::RejectedInput("mean of an empty node".into()));
        }
        let v = self.nodes[a].value.iter().sum::<f64>() / n as f64;
        Ok(self.push(1, 1, vec![v], Op::Mean(a)))
    }

    /// Replicates a `1 x 1` node into an `n x 1` column.
    pub fn broadcast_scalar(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if (r, c) != (1, 1) {
            return Err(Error::DimensionMismatch { expected: 1, got: r * c });
        }
        let v = vec![self.nodes[a].value[0]; n];
        Ok(self.push(n, 1, v, Op::BroadcastScalar(a)))
    }

    /// Selects rows by index; an index may repeat.
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::RejectedInput(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let mut v = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            v.extend_from_slice(&self.nodes[a].value[i * c..(i + 1) * c]);
        }
        Ok(self.push(ids.len(), c, v, Op::GatherRows(a, ids.to_vec())))
    }

    fn check_segments(&self, a: NodeId, segments: &[usize], n_segments: usize) -> Result<()> {
        let (r, _) = self.shape(a);
        if segments.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: segments.len(),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::RejectedInput(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        Ok(())
    }

    /// Sums rows into `n_segments` buckets: `out[segments[r]] += a[r]`.
    pub fn segment_sum(
        &mut self,
        a: NodeId,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<NodeId> {
        self.check_segments(a, segments, n_segments)?;
        let (_, c) = self.shape(a);
        let mut v = vec![0.0; n_segments * c];
        for (row, &s) in segments.iter().enumerate() {
            for col in 0..c {
                v[s * c + col] += self.nodes[a].value[row * c + col];
            }
        }
        Ok(self.push(
            n_segments,
            c,
            v,
            Op::SegmentSum(a, segments.to_vec()),
        ))
    }

    /// Averages rows into `n_segments` buckets; an empty bucket stays zero.
    pub fn segment_mean(
        &mut self,
        a: NodeId,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<NodeId> {
        self.check_segments(a, segments, n_segments)?;
        let (_, c) = self.shape(a);
        let mut v = vec![0.0; n_segments * c];
        let mut counts = vec![0usize; n_segments];
        for (row, &s) in segments.iter().enumerate() {
            counts[s] += 1;
            for col in 0..c {
                v[s * c + col] += self.nodes[a].value[row * c + col];
            }
        }
        for s in 0..n_segments {
            if counts[s] > 0 {
                let inv = 1.0 / counts[s] as f64;
                for col in 0..c {
                    v[s * c + col] *= inv;
                }
            }
        }
        Ok(self.push(
            n_segments,
            c,
            v,
            Op::SegmentMean(a, segments.to_vec(), n_segments),
        ))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::DimensionMismatch {
                expected: ar,
                got: br,
            });
        }
        let mut v = Vec::with_capacity(ar * (ac + bc));
        for row in 0..ar {
            v.extend_from_slice(&self.nodes[a].value[row * ac..(row + 1) * ac]);
            v.extend_from_slice(&self.nodes[b].value[row * bc..(row + 1) * bc]);
        }
        Ok(self.push(ar, ac + bc, v, Op::ConcatCols(a, b)))
    }

    /// Applies a different small matrix to each row: `weights` is
    /// `E x (out * in)` (each row one `out x in` matrix, row-major) and `x`
    /// is `E x in`; the result is `E x out`.
    pub fn edge_matvec(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        let (we, wc) = self.shape(weights);
        let (xe, xin) = self.shape(x);
        if we != xe {
            return Err(Error::DimensionMismatch {
                expected: we,
                got: xe,
            });
        }
        if xin == 0 || wc % xin != 0 {
            return Err(Error::DimensionMismatch {
                expected: wc,
                got: xin,
            });
        }
        let out = wc / xin;
        let mut v = vec![0.0; we * out];
        let wv = &self.nodes[weights].value;
        let xv = &self.nodes[x].value;
        for e in 0..we {
            for o in 0..out {
                let mut acc = 0.0;
                for i in 0..xin {
                    acc += wv[e * wc + o * xin + i] * xv[e * xin + i];
                }
                v[e * out + o] = acc;
            }
        }
        Ok(self.push(we, out, v, Op::EdgeMatVec(weights, x)))
    }

    /// Clamps each row into its own `[lo, hi]` interval. The gradient passes
    /// through wherever the input lies inside the interval, boundary
    /// included, and is zero where the clamp is active.
    pub fn clamp_rows(&mut self, a: NodeId, bounds: &[(f64, f64)]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if bounds.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: bounds.len(),
            });
        }
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| lo > hi) {
            return Err(Error::RejectedInput(format!(
                "clamp interval [{lo}, {hi}] is empty"
            )));
        }
        let mut v = self.nodes[a].value.clone();
        for row in 0..r {
            let (lo, hi) = bounds[row];
            for col in 0..c {
                v[row * c + col] = v[row * c + col].clamp(lo, hi);
            }
        }
        Ok(self.push(r, c, v, Op::ClampRows(a, bounds.to_vec())))
    }

    /// Elementwise minimum; on ties the gradient goes to the first argument.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x.min(*y))
            .collect();
        Ok(self.push(r, c, v, Op::MinElem(a, b)))
    }

    /// Runs reverse accumulation from a scalar output node.
    ///
    /// Gradients for every node become available through [`Tape::grad`];
    /// running backward again from another output overwrites them.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::DimensionMismatch { expected: 1, got: r * c });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.rows * n.cols])
            .collect();
        self.grads[output][0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            let gout = std::mem::take(&mut self.grads[id]);
            if gout.iter().all(|g| *g == 0.0) {
                self.grads[id] = gout;
                continue;
            }
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (g, &go) in self.grads[a].iter_mut().zip(&gout) {
                        *g += go;
                    }
                    for (g, &go) in self.grads[b].iter_mut().zip(&gout) {
                        *g += go;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, &go) in self.grads[a].iter_mut().zip(&gout) {
                        *g += go;
                    }
                    for (g, &go) in self.grads[b].iter_mut().zip(&gout) {
                        *g -= go;
                    }
                }
                Op::Mul(a, b) => {
                    for (i, &go) in gout.iter().enumerate() {
                        let av = self.nodes[a].value[i];
                        let bv = self.nodes[b].value[i];
                        self.grads[a][i] += go * bv;
                        self.grads[b][i] += go * av;
                    }
                }
                Op::Scale(a, k) => {
                    for (g, &go) in self.grads[a].iter_mut().zip(&gout) {
                        *g += k * go;
                    }
                }
                Op::AddRowVec(a, b) => {
                    let (rows, cols) = self.shape(a);
                    for (g, &go) in self.grads[a].iter_mut().zip(&gout) {
                        *g += go;
                    }
                    for row in 0..rows {
                        for col in 0..cols {
                            self.grads[b][col] += gout[row * cols + col];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ar, ak) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    // dA = dZ * B^T, dB = A^T * dZ.
                    for i in 0..ar {
                        for k in 0..ak {
                            let mut acc = 0.0;
                            for j in 0..bc {
                                acc += gout[i * bc + j] * self.nodes[b].value[k * bc + j];
                            }
                            self.grads[a][i * ak + k] += acc;
                        }
                    }
                    for k in 0..ak {
                        for j in 0..bc {
                            let mut acc = 0.0;
                            for i in 0..ar {
                                acc += self.nodes[a].value[i * ak + k] * gout[i * bc + j];
                            }
                            self.grads[b][k * bc + j] += acc;
                        }
                    }
                }
                Op::Relu(a) => {
                    for (i, &go) in gout.iter().enumerate() {
                        if self.nodes[a].value[i] > 0.0 {
                            self.grads[a][i] += go;
                        }
                    }
                }
                Op::Exp(a) => {
                    for (i, &go) in gout.iter().enumerate() {
                        self.grads[a][i] += go * self.nodes[id].value[i];
                    }
                }
                Op::Sum(a) => {
                    for g in self.grads[a].iter_mut() {
                        *g += gout[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.grads[a].len() as f64;
                    for g in self.grads[a].iter_mut() {
                        *g += gout[0] / n;
                    }
                }
                Op::BroadcastScalar(a) => {
                    self.grads[a][0] += gout.iter().sum::<f64>();
                }
                Op::GatherRows(a, ids) => {
                    let (_, cols) = self.shape(a);
                    for (row, &src) in ids.iter().enumerate() {
                        for col in 0..cols {
                            self.grads[a][src * cols + col] += gout[row * cols + col];
                        }
                    }
                }
                Op::SegmentSum(a, segments) => {
                    let (_, cols) = self.shape(a);
                    for (row, &s) in segments.iter().enumerate() {
                        for col in 0..cols {
                            self.grads[a][row * cols + col] += gout[s * cols + col];
                        }
                    }
                }
                Op::SegmentMean(a, segments, n_segments) => {
                    let (_, cols) = self.shape(a);
                    let mut counts = vec![0usize; n_segments];
                    for &s in &segments {
                        counts[s] += 1;
                    }
                    for (row, &s) in segments.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for col in 0..cols {
                            self.grads[a][row * cols + col] += gout[s * cols + col] * inv;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (rows, ac) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    for row in 0..rows {
                        for col in 0..ac {
                            self.grads[a][row * ac + col] += gout[row * (ac + bc) + col];
                        }
                        for col in 0..bc {
                            self.grads[b][row * bc + col] += gout[row * (ac + bc) + ac + col];
                        }
                    }
                }
                Op::EdgeMatVec(w, x) => {
                    let (e_count, wc) = self.shape(w);
                    let (_, xin) = self.shape(x);
                    let out = wc / xin;
                    for e in 0..e_count {
                        for o in 0..out {
                            let go = gout[e * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..xin {
                                self.grads[w][e * wc + o * xin + i] +=
                                    go * self.nodes[x].value[e * xin + i];
                                self.grads[x][e * xin + i] +=
                                    go * self.nodes[w].value[e * wc + o * xin + i];
                            }
                        }
                    }
                }
                Op::ClampRows(a, bounds) => {
                    let (rows, cols) = self.shape(a);
                    for row in 0..rows {
                        let (lo, hi) = bounds[row];
                        for col in 0..cols {
                            let v = self.nodes[a].value[row * cols + col];
                            if v >= lo && v <= hi {
                                self.grads[a][row * cols + col] += gout[row * cols + col];
                            }
                        }
                    }
                }
                Op::MinElem(a, b) => {
                    for (i, &go) in gout.iter().enumerate() {
                        if self.nodes[a].value[i] <= self.nodes[b].value[i] {
                            self.grads[a][i] += go;
                        } else {
                            self.grads[b][i] += go;
                        }
                    }
                }
            }
            self.grads[id] = gout;
        }
        Ok(())
    }
}

/// A parameter matrix with an accumulated gradient, owned outside any tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        let grad = vec![0.0; data.len()];
        Ok(Self {
            rows,
            cols,
            data,
            grad,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Puts this parameter on a tape as a leaf.
    pub fn leaf(&self, tape: &mut Tape) -> Result<NodeId> {
        tape.leaf(self.rows, self.cols, self.data.clone())
    }

    /// Adds the tape's gradient for `id` into this parameter's gradient.
    pub fn accumulate_grad(&mut self, tape: &Tape, id: NodeId) -> Result<()> {
        let g = tape.grad(id);
        if g.len() != self.grad.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grad.len(),
                got: g.len(),
            });
        }
        for (acc, &gi) in self.grad.iter_mut().zip(g) {
            *acc += gi;
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function, for checking adjoints.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative disagreement between two gradients, with the denominator
/// floored so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    /// Checks d(scalar)/d(leaf 0) against central differences for a graph
    /// built by `build`, which receives the tape and the leaf id and returns
    /// the scalar output node.
    fn gradcheck<F>(leaf_rows: usize, leaf_cols: usize, seed: u64, tol: f64, build: F)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_vec(&mut rng, leaf_rows * leaf_cols);

        let eval = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(leaf_rows, leaf_cols, x.to_vec()).unwrap();
            let out = build(&mut tape, leaf);
            tape.value(out)[0]
        };

        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_rows, leaf_cols, x0.clone()).unwrap();
        let out = build(&mut tape, leaf);
        tape.backward(out).unwrap();
        let analytic = tape.grad(leaf).to_vec();

        let numeric = finite_difference_gradient(eval, &x0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < tol, "gradient mismatch: max rel err {err:.3e}");
    }

    #[test]
    fn add_sub_mul_scale_gradients() {
        gradcheck(3, 2, 1, 1e-7, |t, x| {
            let y = t.scale(x, 0.7).unwrap();
            let s = t.sub(x, y).unwrap();
            let m = t.mul(s, x).unwrap();
            let a = t.add(m, x).unwrap();
            t.sum(a).unwrap()
        });
    }

    #[test]
    fn matmul_gradient_both_sides() {
        // Left argument.
        gradcheck(3, 4, 2, 1e-7, |t, x| {
            let w = t
                .leaf(4, 2, (0..8).map(|i| 0.3 * i as f64 - 1.0).collect())
                .unwrap();
            let y = t.matmul(x, w).unwrap();
            t.sum(y).unwrap()
        });
        // Right argument.
        gradcheck(4, 2, 3, 1e-7, |t, x| {
            let a = t
                .leaf(3, 4, (0..12).map(|i| 0.25 * i as f64 - 1.2).collect())
                .unwrap();
            let y = t.matmul(a, x).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn relu_exp_mean_gradients() {
        gradcheck(5, 3, 4, 1e-6, |t, x| {
            let r = t.relu(x).unwrap();
            let e = t.exp(r).unwrap();
            t.mean(e).unwrap()
        });
    }

    #[test]
    fn add_row_vec_gradient_on_bias() {
        gradcheck(1, 4, 5, 1e-7, |t, bias| {
            let a = t
                .leaf(3, 4, (0..12).map(|i| 0.1 * i as f64).collect())
                .unwrap();
            let y = t.add_row_vec(a, bias).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn broadcast_and_segment_gradients() {
        gradcheck(1, 1, 6, 1e-7, |t, s| {
            let b = t.broadcast_scalar(s, 5).unwrap();
            let c = t
                .leaf(5, 1, vec![0.3, -0.2, 0.9, 1.1, -0.7])
                .unwrap();
            let m = t.mul(b, c).unwrap();
            let seg = t.segment_sum(m, &[0, 1, 0, 1, 0], 2).unwrap();
            let sq = t.mul(seg, seg).unwrap();
            t.sum(sq).unwrap()
        });
        gradcheck(6, 2, 7, 1e-7, |t, x| {
            let m = t.segment_mean(x, &[2, 0, 2, 2, 0, 1], 3).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn gather_concat_gradients() {
        gradcheck(4, 3, 8, 1e-7, |t, x| {
            let g = t.gather_rows(x, &[3, 1, 1, 0, 2]).unwrap();
            let other = t
                .leaf(5, 2, (0..10).map(|i| 0.2 * i as f64 - 0.9).collect())
                .unwrap();
            let cat = t.concat_cols(g, other).unwrap();
            let sq = t.mul(cat, cat).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn edge_matvec_gradient_both_sides() {
        // Weights side: 3 edges, in = 2, out = 2 -> weights are 3 x 4.
        gradcheck(3, 4, 9, 1e-7, |t, w| {
            let x = t
                .leaf(3, 2, vec![0.5, -0.3, 1.2, 0.8, -0.6, 0.1])
                .unwrap();
            let m = t.edge_matvec(w, x).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq).unwrap()
        });
        // Input side.
        gradcheck(3, 2, 10, 1e-7, |t, x| {
            let w = t
                .leaf(3, 4, (0..12).map(|i| 0.15 * i as f64 - 0.8).collect())
                .unwrap();
            let m = t.edge_matvec(w, x).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn clamp_min_gradients() {
        // Pick values away from the clamp boundaries and min ties so the
        // finite-difference probe stays on one branch.
        let bounds = vec![(-0.5, 0.5); 4];
        gradcheck(4, 1, 11, 1e-6, move |t, x| {
            let c = t.clamp_rows(x, &bounds).unwrap();
            let other = t.leaf(4, 1, vec![0.4, -0.45, 0.2, -0.1]).unwrap();
            let m = t.min_elem(c, other).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn clamp_gradient_is_zero_outside_and_passes_at_boundary() {
        let mut tape = Tape::new();
        let x = tape.leaf(3, 1, vec![2.0, 1.0, 0.3]).unwrap();
        let c = tape.clamp_rows(x, &[(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)]).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        // 2.0 is clamped (zero grad); 1.0 sits exactly on the boundary and
        // passes; 0.3 is interior.
        assert_eq!(tape.grad(x), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn min_ties_route_gradient_to_first_argument() {
        let mut tape = Tape::new();
        let a = tape.leaf(2, 1, vec![1.0, 3.0]).unwrap();
        let b = tape.leaf(2, 1, vec![1.0, 2.0]).unwrap();
        let m = tape.min_elem(a, b).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), &[1.0, 0.0]);
        assert_eq!(tape.grad(b), &[0.0, 1.0]);
    }

    #[test]
    fn segment_mean_leaves_empty_segment_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = tape.segment_mean(x, &[0, 0], 3).unwrap();
        assert_eq!(tape.value(m), &[2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn composite_network_gradient() {
        // A miniature of the real forward pass: edge-conditioned message
        // passing, segment pooling, concatenation, two heads summed into one
        // scalar. Checks every op interacting, not just each in isolation.
        let n_nodes = 4;
        let edges = [(0usize, 1usize), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)];
        let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let tgt: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let node_graph = vec![0usize, 0, 1, 1];

        gradcheck(n_nodes, 2, 12, 1e-6, move |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let ef = t
                .leaf(6, 2, random_vec(&mut rng, 12))
                .unwrap();
            let w_edge = t.leaf(2, 6, random_vec(&mut rng, 12)).unwrap();
            let b_edge = t.leaf(1, 6, random_vec(&mut rng, 6)).unwrap();
            let w_root = t.leaf(2, 3, random_vec(&mut rng, 6)).unwrap();
            let b_node = t.leaf(1, 3, random_vec(&mut rng, 3)).unwrap();
            let w_head = t.leaf(6, 1, random_vec(&mut rng, 6)).unwrap();

            let weights_lin = t.matmul(ef, w_edge).unwrap();
            let weights = t.add_row_vec(weights_lin, b_edge).unwrap();
            let x_src = t.gather_rows(x, &src).unwrap();
            let msgs = t.edge_matvec(weights, x_src).unwrap();
            let agg = t.segment_mean(msgs, &tgt, n_nodes).unwrap();
            let rooted = t.matmul(x, w_root).unwrap();
            let mixed = t.add(agg, rooted).unwrap();
            let biased = t.add_row_vec(mixed, b_node).unwrap();
            let act = t.relu(biased).unwrap();
            let pooled = t.segment_mean(act, &node_graph, 2).unwrap();
            let gathered = t.gather_rows(pooled, &node_graph).unwrap();
            let both = t.concat_cols(act, gathered).unwrap();
            let head = t.matmul(both, w_head).unwrap();
            let sq = t.mul(head, head).unwrap();
            t.mean(sq).unwrap()
        });
    }

    #[test]
    fn rejects_shape_mismatches() {
        let mut tape = Tape::new();
        let a = tape.leaf(2, 2, vec![0.0; 4]).unwrap();
        let b = tape.leaf(3, 2, vec![0.0; 6]).unwrap();
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.matmul(b, b).is_err());
        assert!(tape.add_row_vec(a, b).is_err());
        assert!(tape.concat_cols(a, b).is_err());
        assert!(tape.gather_rows(a, &[5]).is_err());
        assert!(tape.segment_sum(a, &[0], 1).is_err());
        assert!(tape.segment_sum(a, &[0, 9], 2).is_err());
        assert!(tape.clamp_rows(a, &[(0.0, 1.0)]).is_err());
        assert!(tape.clamp_rows(a, &[(1.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(tape.broadcast_scalar(a, 3).is_err());
        assert!(tape.leaf(2, 2, vec![0.0; 3]).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn backward_requires_scalar_and_reports_leaf_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(2, 1, vec![3.0, -1.0]).unwrap();
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[6.0, -2.0]);
        // d(sum x^2)/dx = 2x, and the output's own grad is 1.
        assert_eq!(tape.grad(s), &[1.0]);
    }

    #[test]
    fn tensor_accumulates_tape_gradients() {
        let mut p = Tensor::new(2, 1, vec![1.0, 2.0]).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let leaf = p.leaf(&mut tape).unwrap();
            let sq = tape.mul(leaf, leaf).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.backward(s).unwrap();
            p.accumulate_grad(&tape, leaf).unwrap();
        }
        // Two accumulations of 2x.
        assert_eq!(p.grad, vec![4.0, 8.0]);
        p.zero_grad();
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }
}
