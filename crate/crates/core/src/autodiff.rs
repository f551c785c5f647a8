//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! A [`Graph`] is an append-only record of primitive operations; node `i`
//! may only reference parents `< i`, so the record is acyclic by
//! construction and a backward pass is a single reverse sweep that visits
//! each node exactly once. Leaves are either trainable parameters, settable
//! inputs or constants.
//!
//! Training loops build the graph once and then *replay* it: leaf values are
//! overwritten in place and [`Graph::replay`] recomputes every interior node
//! in recording order. Replay with identical leaf values is bit-identical
//! and allocation-free, which is what makes the per-epoch cost of the
//! solvers acceptable.

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use thiserror::Error;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What kind of leaf a leaf node is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter; receives a gradient.
    Param,
    /// Non-trainable input whose value may be replaced between replays.
    /// Gradients are tracked so input sensitivities can be inspected.
    Input,
    /// Fixed data; no gradient is tracked through it.
    Const,
}

#[derive(Debug, Error)]
pub enum AdError {
    #[error("backward requires a scalar output node, got shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("leaf assignment expects {expected} values, got {got}")]
    LeafLength { expected: usize, got: usize },
    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf(LeafKind),
    // elementwise, same shape
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    // matrix (n x c) combined with a row vector (1 x c)
    AddRow(usize, usize),
    SubRow(usize, usize),
    MulRow(usize, usize),
    DivRow(usize, usize),
    /// Tile a `1 x c` row into `n x c`.
    Bcast(usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    Neg(usize),
    Abs(usize),
    /// sign(x) with sign(0) = 0; carries no gradient of its own.
    Sign(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Sin(usize),
    Cos(usize),
    /// max(x, slope*x); `slope = 0` is the plain rectifier. The derivative
    /// at 0 is taken from the right (value 1).
    LeakyRelu(usize, f64),
    /// The derivative factor of `LeakyRelu` as a value: 1 if x >= 0, else
    /// `slope`. Carries no gradient (the second derivative of the rectifier
    /// is defined as 0 everywhere).
    LeakyGrad(usize, f64),
    SumAll(usize),
    MeanAll(usize),
    /// Column means of an `n x c` matrix as a `1 x c` row.
    ColMean(usize),
    /// Row-wise dot product of two `n x c` matrices, an `n x 1` column.
    RowDot(usize, usize),
    /// Column `j` of an `n x c` matrix as an `n x 1` column.
    SliceCol(usize, usize),
}

impl Op {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf(_))
    }
}

/// Tape-recorded computation over tensors.
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    /// Backward-pass stamp of the last gradient write per node; a stamp
    /// older than `pass` means the buffer content is stale.
    stamps: Vec<u64>,
    needs_grad: Vec<bool>,
    pass: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            stamps: Vec::new(),
            needs_grad: Vec::new(),
            pass: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, needs: bool) -> Var {
        let idx = self.ops.len();
        self.ops.push(op);
        self.shapes.push((rows, cols));
        self.values.push(vec![0.0; rows * cols]);
        self.grads.push(Vec::new());
        self.stamps.push(0);
        self.needs_grad.push(needs);
        if !self.ops[idx].is_leaf() {
            self.eval_node(idx);
        }
        Var(idx)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.shapes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        Tensor::from_rows(r, c, &self.values[v.0])
    }

    /// Scalar value of a `1x1` node.
    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shapes[v.0], (1, 1));
        self.values[v.0][0]
    }

    /// Gradient of the last backward target w.r.t. `v`, if one was computed
    /// in the most recent pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if self.stamps[v.0] == self.pass && self.pass > 0 {
            Some(&self.grads[v.0])
        } else {
            None
        }
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.grad(v).map(|g| Tensor::from_rows(r, c, g))
    }

    // --- leaves ---------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, kind: LeafKind) -> Var {
        let needs = !matches!(kind, LeafKind::Const);
        let v = self.push(Op::Leaf(kind), t.rows(), t.cols(), needs);
        self.values[v.0].copy_from_slice(t.data());
        v
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, LeafKind::Param)
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, LeafKind::Input)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, LeafKind::Const)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(&Tensor::scalar(x))
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.ops[v.0] {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    /// Overwrite a leaf value in place (the shape must not change).
    pub fn set_leaf(&mut self, v: Var, data: &[f64]) -> Result<(), AdError> {
        if !self.ops[v.0].is_leaf() {
            return Err(AdError::NotLeaf(v.0));
        }
        let buf = &mut self.values[v.0];
        if buf.len() != data.len() {
            return Err(AdError::LeafLength {
                expected: buf.len(),
                got: data.len(),
            });
        }
        buf.copy_from_slice(data);
        Ok(())
    }

    /// All `Param` leaves, in recording order.
    pub fn param_leaves(&self) -> Vec<Var> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Leaf(LeafKind::Param)))
            .map(|(i, _)| Var(i))
            .collect()
    }

    // --- operations ------------------------------------------------------

    fn same_shape2(&self, a: Var, b: Var, what: &str) -> (usize, usize) {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        assert_eq!(sa, sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
        sa
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape2(a, b, "add");
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a.0, b.0), r, c, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape2(a, b, "sub");
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a.0, b.0), r, c, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape2(a, b, "mul");
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a.0, b.0), r, c, needs)
    }

    fn row_op_shape(&self, a: Var, r: Var, what: &str) -> (usize, usize) {
        let (n, c) = self.shapes[a.0];
        let (rr, rc) = self.shapes[r.0];
        assert_eq!((rr, rc), (1, c), "{what}: expected 1x{c} row, got {rr}x{rc}");
        (n, c)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.row_op_shape(a, row, "add_row");
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a.0, row.0), n, c, needs)
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.row_op_shape(a, row, "sub_row");
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::SubRow(a.0, row.0), n, c, needs)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.row_op_shape(a, row, "mul_row");
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::MulRow(a.0, row.0), n, c, needs)
    }

    pub fn div_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.row_op_shape(a, row, "div_row");
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::DivRow(a.0, row.0), n, c, needs)
    }

    /// Tile a `1 x c` row vector into `n x c`.
    pub fn bcast(&mut self, a: Var, n: usize) -> Var {
        let (r, c) = self.shapes[a.0];
        assert_eq!(r, 1, "bcast expects a 1 x c row, got {r}x{c}");
        let needs = self.needs(a);
        self.push(Op::Bcast(a.0), n, c, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shapes[a.0];
        let (k2, n) = self.shapes[b.0];
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a.0, b.0), m, n, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shapes[a.0];
        let needs = self.needs(a);
        self.push(Op::Scale(a.0, s), r, c, needs)
    }

    pub fn add_const(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shapes[a.0];
        let needs = self.needs(a);
        self.push(Op::AddConst(a.0, s), r, c, needs)
    }

    fn unary(&mut self, a: Var, op: fn(usize) -> Op) -> Var {
        let (r, c) = self.shapes[a.0];
        let needs = self.needs(a);
        self.push(op(a.0), r, c, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs)
    }
    pub fn sign(&mut self, a: Var) -> Var {
        let (r, c) = self.shapes[a.0];
        self.push(Op::Sign(a.0), r, c, false)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let (r, c) = self.shapes[a.0];
        let needs = self.needs(a);
        self.push(Op::LeakyRelu(a.0, slope), r, c, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Pointwise rectifier derivative (1 for `x >= 0`, `slope` below);
    /// treated as locally constant by the backward pass.
    pub fn leaky_grad(&mut self, a: Var, slope: f64) -> Var {
        let (r, c) = self.shapes[a.0];
        self.push(Op::LeakyGrad(a.0, slope), r, c, false)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let needs = self.needs(a);
        self.push(Op::SumAll(a.0), 1, 1, needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let needs = self.needs(a);
        self.push(Op::MeanAll(a.0), 1, 1, needs)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let (_, c) = self.shapes[a.0];
        let needs = self.needs(a);
        self.push(Op::ColMean(a.0), 1, c, needs)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (n, _) = self.same_shape2(a, b, "row_dot");
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::RowDot(a.0, b.0), n, 1, needs)
    }

    pub fn slice_col(&mut self, a: Var, j: usize) -> Var {
        let (n, c) = self.shapes[a.0];
        assert!(j < c, "slice_col: column {j} out of {c}");
        let needs = self.needs(a);
        self.push(Op::SliceCol(a.0, j), n, 1, needs)
    }

    // --- forward evaluation ----------------------------------------------

    fn eval_node(&mut self, idx: usize) {
        let op = self.ops[idx];
        let (rows, cols) = self.shapes[idx];
        let (lo, hi) = self.values.split_at_mut(idx);
        let out = &mut hi[0][..];
        match op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => binary(out, &lo[a], &lo[b], |x, y| x + y),
            Op::Sub(a, b) => binary(out, &lo[a], &lo[b], |x, y| x - y),
            Op::Mul(a, b) => binary(out, &lo[a], &lo[b], |x, y| x * y),
            Op::AddRow(a, r) => row_broadcast(out, &lo[a], &lo[r], cols, |x, y| x + y),
            Op::SubRow(a, r) => row_broadcast(out, &lo[a], &lo[r], cols, |x, y| x - y),
            Op::MulRow(a, r) => row_broadcast(out, &lo[a], &lo[r], cols, |x, y| x * y),
            Op::DivRow(a, r) => row_broadcast(out, &lo[a], &lo[r], cols, |x, y| x / y),
            Op::Bcast(a) => {
                for i in 0..rows {
                    out[i * cols..(i + 1) * cols].copy_from_slice(&lo[a]);
                }
            }
            Op::MatMul(a, b) => {
                let k = self.shapes[a].1;
                gemm_nn(rows, k, cols, &lo[a], &lo[b], 0.0, out);
            }
            Op::Scale(a, s) => unary(out, &lo[a], |x| x * s),
            Op::AddConst(a, s) => unary(out, &lo[a], |x| x + s),
            Op::Neg(a) => unary(out, &lo[a], |x| -x),
            Op::Abs(a) => unary(out, &lo[a], f64::abs),
            Op::Sign(a) => unary(out, &lo[a], |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Tanh(a) => unary(out, &lo[a], f64::tanh),
            Op::Exp(a) => unary(out, &lo[a], f64::exp),
            Op::Ln(a) => unary(out, &lo[a], f64::ln),
            Op::Sqrt(a) => unary(out, &lo[a], f64::sqrt),
            Op::Square(a) => unary(out, &lo[a], |x| x * x),
            Op::Recip(a) => unary(out, &lo[a], |x| 1.0 / x),
            Op::Sin(a) => unary(out, &lo[a], f64::sin),
            Op::Cos(a) => unary(out, &lo[a], f64::cos),
            Op::LeakyRelu(a, slope) => unary(out, &lo[a], |x| if x >= 0.0 { x } else { slope * x }),
            Op::LeakyGrad(a, slope) => unary(out, &lo[a], |x| if x >= 0.0 { 1.0 } else { slope }),
            Op::SumAll(a) => out[0] = lo[a].iter().sum(),
            Op::MeanAll(a) => out[0] = lo[a].iter().sum::<f64>() / lo[a].len() as f64,
            Op::ColMean(a) => {
                let n = self.shapes[a].0;
                out.fill(0.0);
                for row in lo[a].chunks_exact(cols) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                let inv = 1.0 / n as f64;
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
            Op::RowDot(a, b) => {
                let c = self.shapes[a].1;
                for (i, o) in out.iter_mut().enumerate() {
                    let ra = &lo[a][i * c..(i + 1) * c];
                    let rb = &lo[b][i * c..(i + 1) * c];
                    *o = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                }
            }
            Op::SliceCol(a, j) => {
                let c = self.shapes[a].1;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = lo[a][i * c + j];
                }
            }
        }
    }

    /// Recompute every non-leaf node in recording order. With unchanged leaf
    /// values this reproduces all node values bit-identically.
    pub fn replay(&mut self) {
        for idx in 0..self.ops.len() {
            if !self.ops[idx].is_leaf() {
                self.eval_node(idx);
            }
        }
    }

    // --- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `output`. Gradients of all nodes that
    /// `output` depends on (and that track gradients) become available via
    /// [`Graph::grad`]; the common case is reading parameter-leaf gradients.
    pub fn backward(&mut self, output: Var) -> Result<(), AdError> {
        let (r, c) = self.shapes[output.0];
        if (r, c) != (1, 1) {
            return Err(AdError::NonScalarOutput { rows: r, cols: c });
        }
        self.pass += 1;
        let pass = self.pass;
        let g = &mut self.grads[output.0];
        if g.len() != 1 {
            *g = vec![0.0; 1];
        }
        g[0] = 1.0;
        self.stamps[output.0] = pass;

        for idx in (0..=output.0).rev() {
            if self.stamps[idx] != pass || !self.needs_grad[idx] || self.ops[idx].is_leaf() {
                continue;
            }
            self.propagate(idx, pass);
        }
        Ok(())
    }

    /// Gradient of `output` with respect to every trainable parameter leaf,
    /// as `(leaf, gradient)` pairs in recording order. Leaves the output
    /// does not depend on get zero gradients.
    pub fn backward_params(&mut self, output: Var) -> Result<Vec<(Var, Tensor)>, AdError> {
        self.backward(output)?;
        Ok(self
            .param_leaves()
            .into_iter()
            .map(|v| {
                let (r, c) = self.shapes[v.0];
                let t = self
                    .grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(r, c));
                (v, t)
            })
            .collect())
    }

    fn propagate(&mut self, idx: usize, pass: u64) {
        let op = self.ops[idx];
        let cols = self.shapes[idx].1;
        // Split so the child gradient can be read while parent gradients are
        // written; parents always precede children on the tape.
        let (glo, ghi) = self.grads.split_at_mut(idx);
        let g: &[f64] = &ghi[0];
        let values = &self.values;
        let shapes = &self.shapes;
        let stamps = &mut self.stamps;
        let needs = &self.needs_grad;

        // Accumulate `f(j)` into the gradient of parent `p`; the first write
        // of a pass overwrites so no zeroing sweep is needed.
        macro_rules! acc {
            ($p:expr, $n:expr, $f:expr) => {{
                let p = $p;
                if needs[p] {
                    let n = $n;
                    let dst = &mut glo[p];
                    if dst.len() != n {
                        dst.resize(n, 0.0);
                    }
                    if stamps[p] != pass {
                        for j in 0..n {
                            dst[j] = $f(j);
                        }
                        stamps[p] = pass;
                    } else {
                        for j in 0..n {
                            dst[j] += $f(j);
                        }
                    }
                }
            }};
        }

        let numel = |p: usize| shapes[p].0 * shapes[p].1;

        match op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                acc!(a, g.len(), |j| g[j]);
                acc!(b, g.len(), |j| g[j]);
            }
            Op::Sub(a, b) => {
                acc!(a, g.len(), |j| g[j]);
                acc!(b, g.len(), |j: usize| -g[j]);
            }
            Op::Mul(a, b) => {
                let va = &values[a];
                let vb = &values[b];
                acc!(a, g.len(), |j| g[j] * vb[j]);
                acc!(b, g.len(), |j| g[j] * va[j]);
            }
            Op::AddRow(a, r) => {
                acc!(a, g.len(), |j| g[j]);
                acc!(r, cols, |j: usize| col_sum(g, cols, j));
            }
            Op::SubRow(a, r) => {
                acc!(a, g.len(), |j| g[j]);
                acc!(r, cols, |j: usize| -col_sum(g, cols, j));
            }
            Op::MulRow(a, r) => {
                let vr = &values[r];
                let va = &values[a];
                acc!(a, g.len(), |j: usize| g[j] * vr[j % cols]);
                acc!(r, cols, |j: usize| {
                    let mut s = 0.0;
                    let mut k = j;
                    while k < g.len() {
                        s += g[k] * va[k];
                        k += cols;
                    }
                    s
                });
            }
            Op::DivRow(a, r) => {
                let vr = &values[r];
                let va = &values[a];
                acc!(a, g.len(), |j: usize| g[j] / vr[j % cols]);
                acc!(r, cols, |j: usize| {
                    let mut s = 0.0;
                    let mut k = j;
                    while k < g.len() {
                        s += g[k] * va[k];
                        k += cols;
                    }
                    -s / (vr[j] * vr[j])
                });
            }
            Op::Bcast(a) => {
                acc!(a, cols, |j: usize| col_sum(g, cols, j));
            }
            Op::MatMul(a, b) => {
                let (m, k) = shapes[a];
                let n = shapes[b].1;
                if needs[a] {
                    let dst = &mut glo[a];
                    if dst.len() != m * k {
                        dst.resize(m * k, 0.0);
                    }
                    let beta = if stamps[a] != pass { 0.0 } else { 1.0 };
                    // dA = G @ B^T
                    gemm_nt(m, n, k, g, &values[b], beta, dst);
                    stamps[a] = pass;
                }
                if needs[b] {
                    let dst = &mut glo[b];
                    if dst.len() != k * n {
                        dst.resize(k * n, 0.0);
                    }
                    let beta = if stamps[b] != pass { 0.0 } else { 1.0 };
                    // dB = A^T @ G
                    gemm_tn(k, m, n, &values[a], g, beta, dst);
                    stamps[b] = pass;
                }
            }
            Op::Scale(a, s) => acc!(a, g.len(), |j| g[j] * s),
            Op::AddConst(a, _) => acc!(a, g.len(), |j| g[j]),
            Op::Neg(a) => acc!(a, g.len(), |j: usize| -g[j]),
            Op::Abs(a) => {
                let va = &values[a];
                acc!(a, g.len(), |j: usize| {
                    g[j] * if va[j] > 0.0 {
                        1.0
                    } else if va[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Sign(_) | Op::LeakyGrad(_, _) => {}
            Op::Tanh(a) => {
                let y = &values[idx];
                acc!(a, g.len(), |j: usize| g[j] * (1.0 - y[j] * y[j]));
            }
            Op::Exp(a) => {
                let y = &values[idx];
                acc!(a, g.len(), |j: usize| g[j] * y[j]);
            }
            Op::Ln(a) => {
                let va = &values[a];
                acc!(a, g.len(), |j: usize| g[j] / va[j]);
            }
            Op::Sqrt(a) => {
                let y = &values[idx];
                acc!(a, g.len(), |j: usize| g[j] * 0.5 / y[j]);
            }
            Op::Square(a) => {
                let va = &values[a];
                acc!(a, g.len(), |j: usize| g[j] * 2.0 * va[j]);
            }
            Op::Recip(a) => {
                let y = &values[idx];
                acc!(a, g.len(), |j: usize| -g[j] * y[j] * y[j]);
            }
            Op::Sin(a) => {
                let va = &values[a];
                acc!(a, g.len(), |j: usize| g[j] * va[j].cos());
            }
            Op::Cos(a) => {
                let va = &values[a];
                acc!(a, g.len(), |j: usize| -g[j] * va[j].sin());
            }
            Op::LeakyRelu(a, slope) => {
                let va = &values[a];
                acc!(a, g.len(), |j: usize| {
                    g[j] * if va[j] >= 0.0 { 1.0 } else { slope }
                });
            }
            Op::SumAll(a) => {
                let gs = g[0];
                acc!(a, numel(a), |_j| gs);
            }
            Op::MeanAll(a) => {
                let n = numel(a);
                let gs = g[0] / n as f64;
                acc!(a, n, |_j| gs);
            }
            Op::ColMean(a) => {
                let n = shapes[a].0;
                let ac = shapes[a].1;
                let inv = 1.0 / n as f64;
                acc!(a, n * ac, |j: usize| g[j % ac] * inv);
            }
            Op::RowDot(a, b) => {
                let c = shapes[a].1;
                let va = &values[a];
                let vb = &values[b];
                acc!(a, numel(a), |j: usize| g[j / c] * vb[j]);
                acc!(b, numel(b), |j: usize| g[j / c] * va[j]);
            }
            Op::SliceCol(a, col_idx) => {
                let c = shapes[a].1;
                acc!(a, numel(a), |j: usize| {
                    if j % c == col_idx {
                        g[j / c]
                    } else {
                        0.0
                    }
                });
            }
        }
    }
}

#[inline]
fn unary(out: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64) {
    for (o, x) in out.iter_mut().zip(a) {
        *o = f(*x);
    }
}

#[inline]
fn binary(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = f(*x, *y);
    }
}

#[inline]
fn row_broadcast(out: &mut [f64], a: &[f64], row: &[f64], cols: usize, f: impl Fn(f64, f64) -> f64) {
    for (orow, arow) in out.chunks_exact_mut(cols).zip(a.chunks_exact(cols)) {
        for ((o, x), y) in orow.iter_mut().zip(arow).zip(row) {
            *o = f(*x, *y);
        }
    }
}

#[inline]
fn col_sum(g: &[f64], cols: usize, j: usize) -> f64 {
    let mut s = 0.0;
    let mut k = j;
    while k < g.len() {
        s += g[k];
        k += cols;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 has gradient 6
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        let y = g.tanh(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(2, 2));
        let y = g.square(x);
        assert!(matches!(
            g.backward(y),
            Err(AdError::NonScalarOutput { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn matmul_and_reduction_gradients_match_finite_differences() {
        // loss = mean((X @ W + b)^2), checked against central differences
        let x = Tensor::from_rows(3, 2, &[0.3, -1.2, 0.7, 0.1, -0.5, 0.9]);
        let w0 = Tensor::from_rows(2, 2, &[0.2, -0.4, 1.1, 0.3]);
        let b0 = Tensor::row(&[0.05, -0.2]);

        let eval = |wd: &[f64], bd: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xl = g.constant(&x);
            let w = g.param(&Tensor::from_rows(2, 2, wd));
            let b = g.param(&Tensor::row(bd));
            let h = g.matmul(xl, w);
            let h = g.add_row(h, b);
            let s = g.square(h);
            let l = g.mean_all(s);
            g.item(l)
        };

        let mut g = Graph::new();
        let xl = g.constant(&x);
        let w = g.param(&w0);
        let b = g.param(&b0);
        let h = g.matmul(xl, w);
        let h = g.add_row(h, b);
        let s = g.square(h);
        let l = g.mean_all(s);
        g.backward(l).unwrap();
        let gw = g.grad(w).unwrap().to_vec();
        let gb = g.grad(b).unwrap().to_vec();

        let h_fd = 1e-6;
        for i in 0..4 {
            let mut wp = w0.data().to_vec();
            let mut wm = w0.data().to_vec();
            wp[i] += h_fd;
            wm[i] -= h_fd;
            let fd = (eval(&wp, b0.data()) - eval(&wm, b0.data())) / (2.0 * h_fd);
            assert!((fd - gw[i]).abs() < 1e-8, "w[{i}]: {fd} vs {}", gw[i]);
        }
        for i in 0..2 {
            let mut bp = b0.data().to_vec();
            let mut bm = b0.data().to_vec();
            bp[i] += h_fd;
            bm[i] -= h_fd;
            let fd = (eval(w0.data(), &bp) - eval(w0.data(), &bm)) / (2.0 * h_fd);
            assert!((fd - gb[i]).abs() < 1e-8, "b[{i}]: {fd} vs {}", gb[i]);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_rows(2, 2, &[0.1, 0.7, -0.3, 2.4]));
        let w = g.param(&Tensor::from_rows(2, 2, &[1.0, -0.5, 0.25, 2.0]));
        let h = g.matmul(x, w);
        let t = g.tanh(h);
        let l = g.mean_all(t);
        let before: Vec<Vec<f64>> = (0..g.len()).map(|i| g.value(Var(i)).to_vec()).collect();
        g.replay();
        for i in 0..g.len() {
            let now = g.value(Var(i));
            for (a, b) in now.iter().zip(&before[i]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(g.item(l).is_finite());
    }

    #[test]
    fn set_leaf_then_replay_updates_downstream() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::scalar(2.0));
        let y = g.square(x);
        assert_eq!(g.item(y), 4.0);
        g.set_leaf(x, &[5.0]).unwrap();
        g.replay();
        assert_eq!(g.item(y), 25.0);
        assert!(matches!(
            g.set_leaf(x, &[1.0, 2.0]),
            Err(AdError::LeafLength { expected: 1, got: 2 })
        ));
        assert!(matches!(g.set_leaf(y, &[1.0]), Err(AdError::NotLeaf(_))));
    }

    #[test]
    fn gradient_accumulates_when_node_used_twice() {
        // f = x * x (same parent twice) -> df/dx = 2x
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(1.5));
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_linearity() {
        // grad of a*f + b*h equals a*grad f + b*grad h for shared params
        let xs = Tensor::from_rows(4, 1, &[0.2, -0.4, 1.3, 0.8]);
        let w0 = Tensor::from_rows(1, 3, &[0.3, -0.2, 0.9]);

        let build = |g: &mut Graph| -> (Var, Var, Var) {
            let x = g.constant(&xs);
            let w = g.param(&w0);
            let h = g.matmul(x, w);
            let t = g.tanh(h);
            let f = g.mean_all(t);
            let sq = g.square(h);
            let hq = g.mean_all(sq);
            (w, f, hq)
        };

        let (alpha, beta) = (2.5, -1.25);

        let mut g1 = Graph::new();
        let (w1, f1, h1) = build(&mut g1);
        let fa = g1.scale(f1, alpha);
        let hb = g1.scale(h1, beta);
        let combined = g1.add(fa, hb);
        g1.backward(combined).unwrap();
        let g_combined = g1.grad(w1).unwrap().to_vec();

        let mut g2 = Graph::new();
        let (w2, f2, _) = build(&mut g2);
        g2.backward(f2).unwrap();
        let gf = g2.grad(w2).unwrap().to_vec();

        let mut g3 = Graph::new();
        let (w3, _, h3) = build(&mut g3);
        g3.backward(h3).unwrap();
        let gh = g3.grad(w3).unwrap().to_vec();

        for i in 0..3 {
            let lin = alpha * gf[i] + beta * gh[i];
            assert!(
                (g_combined[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()),
                "component {i}: {} vs {}",
                g_combined[i],
                lin
            );
        }
    }

    #[test]
    fn slice_and_rowdot_gradients() {
        // loss = mean(rowdot(A, A)) = mean over rows of |row|^2
        let mut g = Graph::new();
        let a0 = Tensor::from_rows(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let a = g.param(&a0);
        let d = g.row_dot(a, a);
        let l = g.mean_all(d);
        g.backward(l).unwrap();
        let ga = g.grad(a).unwrap();
        for j in 0..6 {
            assert!((ga[j] - a0.data()[j]).abs() < 1e-15); // d/dA mean_i |a_i|^2 = 2A/n, n=2
        }

        let mut g2 = Graph::new();
        let a = g2.param(&a0);
        let c1 = g2.slice_col(a, 1);
        let l = g2.sum_all(c1);
        g2.backward(l).unwrap();
        assert_eq!(g2.grad(a).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
