//! Computation-graph engine: reverse-mode gradients over a Wengert tape of
//! matrix-valued nodes, plus scalar dual numbers for forward-mode directional
//! derivatives.
//!
//! The tangent channel used for time derivatives (see [`Dual`]) is built out
//! of ordinary tape nodes, so reverse mode differentiates through
//! forward-mode quantities transparently.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// One primitive per node. Parent fields are tape indices, which always
/// point at earlier nodes, so the tape is topologically ordered by
/// construction and cycles are unrepresentable.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise a + b (same shape).
    Add(usize, usize),
    /// Elementwise a − b (same shape).
    Sub(usize, usize),
    /// Elementwise a ⊙ b (same shape).
    Mul(usize, usize),
    Neg(usize),
    /// x · c for a scalar constant c.
    Scale(usize, f64),
    /// x + c elementwise; the constant itself plays no role in the backward
    /// pass.
    AddConst(usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    Square(usize),
    /// ceil(x) with stopped gradient: the binary mask is not differentiable
    /// and must not receive adjoints, so the parent is deliberately absent.
    CeilStopGrad,
    /// (r×k)·(k×c) matrix product; inner sums accumulate in ascending k.
    MatMul(usize, usize),
    /// Aᵀ·B for A: M×p, B: M×q; inner sums accumulate in ascending row index.
    MatMulTn(usize, usize),
    /// Matrix (M×c) + row (1×c) broadcast over rows.
    AddRow(usize, usize),
    /// Matrix (M×c) − row (1×c) broadcast over rows.
    SubRow(usize, usize),
    /// Matrix (M×c) ⊙ row (1×c) broadcast over rows.
    MulRow(usize, usize),
    /// Matrix (M×c) ⊙ constant row of length c (no gradient into the row).
    MulRowConst(usize, Vec<f64>),
    /// Column means: M×c → 1×c.
    MeanRows(usize),
    /// Sum of all entries → 1×1.
    SumAll(usize),
    /// Horizontal concatenation of equal-row-count blocks.
    ConcatCols(Vec<usize>),
    /// Extract entry (i, j) → 1×1.
    Index(usize, usize, usize),
    /// Batched mat-vec: rows of `a` (M×m²) reshaped to m×m, applied to rows
    /// of `b` (M×m): out[i][r] = Σ_c a[i][r·m+c]·b[i][c].
    Bmv(usize, usize),
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Arena of nodes; values are computed eagerly on construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node. Cheap to copy; all arithmetic allocates new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    rows: usize,
    cols: usize,
}

/// Adjoints of one backward pass, keyed by node.
pub struct Gradients {
    adj: Vec<Vec<f64>>,
}

impl Gradients {
    /// Adjoint buffer of `v` (same layout as its value).
    pub fn get(&self, v: Var<'_>) -> &[f64] {
        &self.adj[v.idx]
    }

    /// Adjoint of a scalar node.
    pub fn scalar(&self, v: Var<'_>) -> f64 {
        debug_assert_eq!(self.adj[v.idx].len(), 1);
        self.adj[v.idx][0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var<'_> {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, rows, cols, op });
        Var { tape: self, idx: nodes.len() - 1, rows, cols }
    }

    /// Matrix-valued input node (row-major).
    pub fn leaf(&self, values: &[f64], rows: usize, cols: usize) -> Var<'_> {
        assert_eq!(values.len(), rows * cols, "leaf shape mismatch");
        self.push(values.to_vec(), rows, cols, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![v], 1, 1, Op::Leaf)
    }

    fn value_of(&self, idx: usize) -> Vec<f64> {
        self.nodes.borrow()[idx].value.clone()
    }

    /// Reverse pass from a scalar root. Adjoints accumulate in reverse
    /// creation order, visiting each node exactly once; repeated calls on the
    /// same tape are independent (buffers are fresh per call).
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if root.rows != 1 || root.cols != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {}x{}",
                root.rows, root.cols
            )));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[root.idx][0] = 1.0;
        for i in (0..=root.idx).rev() {
            // Parents always sit at lower indices, so adj splits into
            // disjoint write (parents) and read (current) regions.
            let (lo, hi) = adj.split_at_mut(i);
            let a = &hi[0];
            if a.iter().all(|&g| g == 0.0) {
                continue;
            }
            let adj = lo;
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(p, q) => {
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g;
                        adj[*q][k] += g;
                    }
                }
                Op::Sub(p, q) => {
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g;
                        adj[*q][k] -= g;
                    }
                }
                Op::Mul(p, q) => {
                    let (pv, qv) = (&nodes[*p].value, &nodes[*q].value);
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g * qv[k];
                        adj[*q][k] += g * pv[k];
                    }
                }
                Op::Neg(p) => {
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] -= g;
                    }
                }
                Op::Scale(p, c) => {
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g * c;
                    }
                }
                Op::AddConst(p) => {
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g;
                    }
                }
                Op::Tanh(p) => {
                    for (k, &g) in a.iter().enumerate() {
                        let y = node.value[k];
                        adj[*p][k] += g * (1.0 - y * y);
                    }
                }
                Op::Relu(p) => {
                    let pv = &nodes[*p].value;
                    for (k, &g) in a.iter().enumerate() {
                        if pv[k] > 0.0 {
                            adj[*p][k] += g;
                        }
                    }
                }
                Op::Sqrt(p) => {
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g * 0.5 / node.value[k];
                    }
                }
                Op::Square(p) => {
                    let pv = &nodes[*p].value;
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g * 2.0 * pv[k];
                    }
                }
                Op::CeilStopGrad => {}
                Op::MatMul(p, q) => {
                    let (pn, qn) = (&nodes[*p], &nodes[*q]);
                    let (m, kk, c) = (pn.rows, pn.cols, qn.cols);
                    for i in 0..m {
                        for j in 0..c {
                            let g = a[i * c + j];
                            if g == 0.0 {
                                continue;
                            }
                            for k in 0..kk {
                                adj[*p][i * kk + k] += g * qn.value[k * c + j];
                                adj[*q][k * c + j] += g * pn.value[i * kk + k];
                            }
                        }
                    }
                }
                Op::MatMulTn(p, q) => {
                    let (pn, qn) = (&nodes[*p], &nodes[*q]);
                    let (m, pc, qc) = (pn.rows, pn.cols, qn.cols);
                    for r in 0..pc {
                        for s in 0..qc {
                            let g = a[r * qc + s];
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..m {
                                adj[*p][i * pc + r] += g * qn.value[i * qc + s];
                                adj[*q][i * qc + s] += g * pn.value[i * pc + r];
                            }
                        }
                    }
                }
                Op::AddRow(p, q) => {
                    let c = node.cols;
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g;
                        adj[*q][k % c] += g;
                    }
                }
                Op::SubRow(p, q) => {
                    let c = node.cols;
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g;
                        adj[*q][k % c] -= g;
                    }
                }
                Op::MulRow(p, q) => {
                    let (pv, qv) = (&nodes[*p].value, &nodes[*q].value);
                    let c = node.cols;
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g * qv[k % c];
                        adj[*q][k % c] += g * pv[k];
                    }
                }
                Op::MulRowConst(p, row) => {
                    let c = node.cols;
                    for (k, &g) in a.iter().enumerate() {
                        adj[*p][k] += g * row[k % c];
                    }
                }
                Op::MeanRows(p) => {
                    let pn = &nodes[*p];
                    let inv = 1.0 / pn.rows as f64;
                    for i in 0..pn.rows {
                        for j in 0..pn.cols {
                            adj[*p][i * pn.cols + j] += a[j] * inv;
                        }
                    }
                }
                Op::SumAll(p) => {
                    let g = a[0];
                    for slot in adj[*p].iter_mut() {
                        *slot += g;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        for i in 0..rows {
                            for j in 0..pc {
                                adj[p][i * pc + j] += a[i * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::Index(p, i, j) => {
                    let pc = nodes[*p].cols;
                    adj[*p][i * pc + j] += a[0];
                }
                Op::Bmv(p, q) => {
                    let qn = &nodes[*q];
                    let (mm, m) = (qn.rows, qn.cols);
                    let (pv, qv) = (&nodes[*p].value, &qn.value);
                    for i in 0..mm {
                        for r in 0..m {
                            let g = a[i * m + r];
                            if g == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                adj[*p][i * m * m + r * m + c] += g * qv[i * m + c];
                                adj[*q][i * m + c] += g * pv[i * m * m + r * m + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { adj })
    }
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }

    pub fn value(self) -> Vec<f64> {
        self.tape.value_of(self.idx)
    }

    pub fn scalar_value(self) -> f64 {
        debug_assert!(self.rows == 1 && self.cols == 1);
        self.tape.nodes.borrow()[self.idx].value[0]
    }

    fn same_shape(self, other: Var<'t>, what: &str) {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "{what}: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v: Vec<f64> = self.value().iter().map(|&x| f(x)).collect();
        self.tape.push(v, self.rows, self.cols, op)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.idx), |x| x.max(0.0))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    /// ceil with stopped gradient (mask construction).
    pub fn ceil_stop_grad(self) -> Var<'t> {
        self.unary(Op::CeilStopGrad, f64::ceil)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |x| x * c)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.idx), |x| x + c)
    }

    /// (r×k)·(k×c) product.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let (m, kk, c) = (self.rows, self.cols, rhs.cols);
        let (av, bv) = (self.value(), rhs.value());
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..kk {
                    acc += av[i * kk + k] * bv[k * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        self.tape.push(out, m, c, Op::MatMul(self.idx, rhs.idx))
    }

    /// selfᵀ·rhs, both M×·.
    pub fn matmul_tn(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.rows, rhs.rows, "matmul_tn row mismatch");
        let (m, p, q) = (self.rows, self.cols, rhs.cols);
        let (av, bv) = (self.value(), rhs.value());
        let mut out = vec![0.0; p * q];
        for r in 0..p {
            for s in 0..q {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += av[i * p + r] * bv[i * q + s];
                }
                out[r * q + s] = acc;
            }
        }
        self.tape.push(out, p, q, Op::MatMulTn(self.idx, rhs.idx))
    }

    /// Matrix + row broadcast.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        assert!(row.rows == 1 && row.cols == self.cols, "add_row shape mismatch");
        let (xv, rv) = (self.value(), row.value());
        let out: Vec<f64> = xv.iter().enumerate().map(|(k, &x)| x + rv[k % self.cols]).collect();
        self.tape.push(out, self.rows, self.cols, Op::AddRow(self.idx, row.idx))
    }

    /// Matrix − row broadcast.
    pub fn sub_row(self, row: Var<'t>) -> Var<'t> {
        assert!(row.rows == 1 && row.cols == self.cols, "sub_row shape mismatch");
        let (xv, rv) = (self.value(), row.value());
        let out: Vec<f64> = xv.iter().enumerate().map(|(k, &x)| x - rv[k % self.cols]).collect();
        self.tape.push(out, self.rows, self.cols, Op::SubRow(self.idx, row.idx))
    }

    /// Matrix ⊙ row broadcast.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        assert!(row.rows == 1 && row.cols == self.cols, "mul_row shape mismatch");
        let (xv, rv) = (self.value(), row.value());
        let out: Vec<f64> = xv.iter().enumerate().map(|(k, &x)| x * rv[k % self.cols]).collect();
        self.tape.push(out, self.rows, self.cols, Op::MulRow(self.idx, row.idx))
    }

    /// Matrix ⊙ constant row (gradient-stopped mask/scale).
    pub fn mul_row_const(self, row: &[f64]) -> Var<'t> {
        assert_eq!(row.len(), self.cols, "mul_row_const length mismatch");
        let xv = self.value();
        let out: Vec<f64> = xv.iter().enumerate().map(|(k, &x)| x * row[k % self.cols]).collect();
        self.tape
            .push(out, self.rows, self.cols, Op::MulRowConst(self.idx, row.to_vec()))
    }

    /// Column means over rows: M×c → 1×c.
    pub fn mean_rows(self) -> Var<'t> {
        let xv = self.value();
        let inv = 1.0 / self.rows as f64;
        let mut out = vec![0.0; self.cols];
        for j in 0..self.cols {
            let mut acc = 0.0;
            for i in 0..self.rows {
                acc += xv[i * self.cols + j];
            }
            out[j] = acc * inv;
        }
        self.tape.push(out, 1, self.cols, Op::MeanRows(self.idx))
    }

    /// Sum of all entries → scalar.
    pub fn sum_all(self) -> Var<'t> {
        let acc: f64 = self.value().iter().sum();
        self.tape.push(vec![acc], 1, 1, Op::SumAll(self.idx))
    }

    /// Entry (i, j) → scalar.
    pub fn index(self, i: usize, j: usize) -> Var<'t> {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        let v = self.value()[i * self.cols + j];
        self.tape.push(vec![v], 1, 1, Op::Index(self.idx, i, j))
    }

    /// Batched mat-vec: self M×m² (rows reshaped m×m) applied to u M×m.
    pub fn bmv(self, u: Var<'t>) -> Var<'t> {
        let m = u.cols;
        assert_eq!(self.rows, u.rows, "bmv batch mismatch");
        assert_eq!(self.cols, m * m, "bmv expects m^2 columns");
        let (av, uv) = (self.value(), u.value());
        let mut out = vec![0.0; u.rows * m];
        for i in 0..u.rows {
            for r in 0..m {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += av[i * m * m + r * m + c] * uv[i * m + c];
                }
                out[i * m + r] = acc;
            }
        }
        self.tape.push(out, u.rows, m, Op::Bmv(self.idx, u.idx))
    }
}

/// Horizontal concatenation of duals; parts without a tangent contribute
/// structural zeros to the tangent block iff any part carries one.
pub fn concat_cols_dual<'t>(parts: &[Dual<'t>]) -> Dual<'t> {
    let primal = concat_cols(&parts.iter().map(|p| p.primal).collect::<Vec<_>>());
    let tangent = if parts.iter().any(|p| p.tangent.is_some()) {
        Some(concat_cols(
            &parts.iter().map(|p| p.tangent_or_zero()).collect::<Vec<_>>(),
        ))
    } else {
        None
    };
    Dual { primal, tangent }
}

/// Horizontal concatenation of equal-row-count blocks.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols needs at least one block");
    let tape = parts[0].tape;
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = vec![0.0; rows * cols];
    let mut off = 0;
    for p in parts {
        assert_eq!(p.rows, rows, "concat_cols row mismatch");
        let pv = p.value();
        for i in 0..rows {
            out[i * cols + off..i * cols + off + p.cols]
                .copy_from_slice(&pv[i * p.cols..(i + 1) * p.cols]);
        }
        off += p.cols;
    }
    tape.push(out, rows, cols, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "add");
        let out: Vec<f64> =
            self.value().iter().zip(rhs.value().iter()).map(|(&a, &b)| a + b).collect();
        self.tape.push(out, self.rows, self.cols, Op::Add(self.idx, rhs.idx))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "sub");
        let out: Vec<f64> =
            self.value().iter().zip(rhs.value().iter()).map(|(&a, &b)| a - b).collect();
        self.tape.push(out, self.rows, self.cols, Op::Sub(self.idx, rhs.idx))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "mul");
        let out: Vec<f64> =
            self.value().iter().zip(rhs.value().iter()).map(|(&a, &b)| a * b).collect();
        self.tape.push(out, self.rows, self.cols, Op::Mul(self.idx, rhs.idx))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let out: Vec<f64> = self.value().iter().map(|&a| -a).collect();
        self.tape.push(out, self.rows, self.cols, Op::Neg(self.idx))
    }
}

/// Graph-level dual: the tangent channel carries a directional derivative as
/// ordinary tape nodes. `None` is a structural zero tangent (constants and
/// parameters), which keeps tapes small.
#[derive(Clone, Copy)]
pub struct Dual<'t> {
    pub primal: Var<'t>,
    pub tangent: Option<Var<'t>>,
}

impl<'t> Dual<'t> {
    pub fn constant(primal: Var<'t>) -> Self {
        Dual { primal, tangent: None }
    }

    pub fn with_tangent(primal: Var<'t>, tangent: Var<'t>) -> Self {
        Dual { primal, tangent: Some(tangent) }
    }

    /// Right-multiplication by a zero-tangent weight matrix.
    pub fn matmul_param(self, w: Var<'t>) -> Dual<'t> {
        Dual {
            primal: self.primal.matmul(w),
            tangent: self.tangent.map(|t| t.matmul(w)),
        }
    }

    /// Add a zero-tangent row (bias).
    pub fn add_row_param(self, row: Var<'t>) -> Dual<'t> {
        Dual { primal: self.primal.add_row(row), tangent: self.tangent }
    }

    /// Scale rows by a zero-tangent parameter row.
    pub fn mul_row_param(self, row: Var<'t>) -> Dual<'t> {
        Dual {
            primal: self.primal.mul_row(row),
            tangent: self.tangent.map(|t| t.mul_row(row)),
        }
    }

    /// Mask/scale by a constant row.
    pub fn mul_row_const(self, row: &[f64]) -> Dual<'t> {
        Dual {
            primal: self.primal.mul_row_const(row),
            tangent: self.tangent.map(|t| t.mul_row_const(row)),
        }
    }

    /// Elementwise multiply by a zero-tangent mask of the full shape
    /// (dropout masks).
    pub fn mul_mask(self, mask: Var<'t>) -> Dual<'t> {
        Dual {
            primal: self.primal * mask,
            tangent: self.tangent.map(|t| t * mask),
        }
    }

    /// tanh with tangent (1 − y²)·ẋ.
    pub fn tanh(self) -> Dual<'t> {
        let y = self.primal.tanh();
        let tangent = self.tangent.map(|t| {
            let deriv = y.square().scale(-1.0).add_const(1.0);
            deriv * t
        });
        Dual { primal: y, tangent }
    }

    pub fn scale(self, c: f64) -> Dual<'t> {
        Dual {
            primal: self.primal.scale(c),
            tangent: self.tangent.map(|t| t.scale(c)),
        }
    }

    /// Batched mat-vec with the product rule: self is M×m² (rows are m×m
    /// matrices), `u` is M×m.
    pub fn bmv(self, u: Dual<'t>) -> Dual<'t> {
        let primal = self.primal.bmv(u.primal);
        let tangent = match (self.tangent, u.tangent) {
            (Some(da), Some(du)) => Some(da.bmv(u.primal) + self.primal.bmv(du)),
            (Some(da), None) => Some(da.bmv(u.primal)),
            (None, Some(du)) => Some(self.primal.bmv(du)),
            (None, None) => None,
        };
        Dual { primal, tangent }
    }

    /// Tangent as a Var, materializing a structural zero if needed.
    pub fn tangent_or_zero(self) -> Var<'t> {
        match self.tangent {
            Some(t) => t,
            None => {
                let zeros = vec![0.0; self.primal.rows() * self.primal.cols()];
                self.primal.tape.leaf(&zeros, self.primal.rows(), self.primal.cols())
            }
        }
    }
}

impl<'t> std::ops::Add for Dual<'t> {
    type Output = Dual<'t>;
    fn add(self, rhs: Dual<'t>) -> Dual<'t> {
        let tangent = match (self.tangent, rhs.tangent) {
            (Some(a), Some(b)) => Some(a + b),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        Dual { primal: self.primal + rhs.primal, tangent }
    }
}

/// Elementwise product rule.
impl<'t> std::ops::Mul for Dual<'t> {
    type Output = Dual<'t>;
    fn mul(self, rhs: Dual<'t>) -> Dual<'t> {
        let tangent = match (self.tangent, rhs.tangent) {
            (Some(da), Some(db)) => Some(da * rhs.primal + self.primal * db),
            (Some(da), None) => Some(da * rhs.primal),
            (None, Some(db)) => Some(self.primal * db),
            (None, None) => None,
        };
        Dual { primal: self.primal * rhs.primal, tangent }
    }
}

/// Scalar dual number for forward-mode directional derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual64 {
    pub primal: f64,
    pub tangent: f64,
}

impl Dual64 {
    pub fn new(primal: f64, tangent: f64) -> Self {
        Dual64 { primal, tangent }
    }

    pub fn constant(v: f64) -> Self {
        Dual64 { primal: v, tangent: 0.0 }
    }

    pub fn tanh(self) -> Self {
        let y = self.primal.tanh();
        Dual64 { primal: y, tangent: (1.0 - y * y) * self.tangent }
    }

    pub fn relu(self) -> Self {
        if self.primal > 0.0 {
            self
        } else {
            Dual64 { primal: 0.0, tangent: 0.0 }
        }
    }

    pub fn sqrt(self) -> Self {
        let y = self.primal.sqrt();
        Dual64 { primal: y, tangent: self.tangent * 0.5 / y }
    }

    pub fn exp(self) -> Self {
        let y = self.primal.exp();
        Dual64 { primal: y, tangent: y * self.tangent }
    }

    pub fn sin(self) -> Self {
        Dual64 { primal: self.primal.sin(), tangent: self.primal.cos() * self.tangent }
    }

    pub fn cos(self) -> Self {
        Dual64 { primal: self.primal.cos(), tangent: -self.primal.sin() * self.tangent }
    }

    pub fn powi(self, n: i32) -> Self {
        let y = self.primal.powi(n);
        Dual64 { primal: y, tangent: n as f64 * self.primal.powi(n - 1) * self.tangent }
    }
}

impl Add for Dual64 {
    type Output = Dual64;
    fn add(self, rhs: Dual64) -> Dual64 {
        Dual64 { primal: self.primal + rhs.primal, tangent: self.tangent + rhs.tangent }
    }
}

impl Sub for Dual64 {
    type Output = Dual64;
    fn sub(self, rhs: Dual64) -> Dual64 {
        Dual64 { primal: self.primal - rhs.primal, tangent: self.tangent - rhs.tangent }
    }
}

impl Mul for Dual64 {
    type Output = Dual64;
    fn mul(self, rhs: Dual64) -> Dual64 {
        Dual64 {
            primal: self.primal * rhs.primal,
            tangent: self.tangent * rhs.primal + self.primal * rhs.tangent,
        }
    }
}

impl Div for Dual64 {
    type Output = Dual64;
    fn div(self, rhs: Dual64) -> Dual64 {
        let inv = 1.0 / rhs.primal;
        Dual64 {
            primal: self.primal * inv,
            tangent: (self.tangent - self.primal * inv * rhs.tangent) * inv,
        }
    }
}

impl Neg for Dual64 {
    type Output = Dual64;
    fn neg(self) -> Dual64 {
        Dual64 { primal: -self.primal, tangent: -self.tangent }
    }
}

/// J(point)·direction by one forward pass with dual numbers.
pub fn jvp<F>(f: F, point: &[f64], direction: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[Dual64]) -> Vec<Dual64>,
{
    if point.len() != direction.len() {
        return Err(Error::Usage(format!(
            "jvp: point length {} != direction length {}",
            point.len(),
            direction.len()
        )));
    }
    let inputs: Vec<Dual64> = point
        .iter()
        .zip(direction.iter())
        .map(|(&p, &d)| Dual64::new(p, d))
        .collect();
    Ok(f(&inputs).into_iter().map(|d| d.tangent).collect())
}

/// Scalar field shared between plain and dual evaluation (integrators, RHS
/// definitions, oracles).
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl Real for Dual64 {
    fn from_f64(v: f64) -> Self {
        Dual64::constant(v)
    }
    fn tanh(self) -> Self {
        Dual64::tanh(self)
    }
    fn sin(self) -> Self {
        Dual64::sin(self)
    }
    fn cos(self) -> Self {
        Dual64::cos(self)
    }
    fn exp(self) -> Self {
        Dual64::exp(self)
    }
    fn sqrt(self) -> Self {
        Dual64::sqrt(self)
    }
}
