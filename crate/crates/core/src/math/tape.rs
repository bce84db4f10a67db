//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its value and a record of its
//! inputs. Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! touches each node once.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::matrix::gemm;
use crate::math::sparse::{EdgeList, SparseRows};
use crate::math::Matrix;

/// Floor applied inside [`Tape::log`]; the only epsilon that changes losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Variance epsilon used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n x c` plus a broadcast `1 x c` row.
    AddRow(Var, Var),
    /// Every row of a `(B*g) x c` input scaled by a `B x 1` column, one
    /// factor per group of `g` rows.
    ScaleGroups(Var, Var, usize),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    MeanAll(Var),
    MeanRows(Var),
    GroupMean(Var, usize),
    /// Repeats each row of a `B x c` input `g` times.
    GroupBroadcast(Var, usize),
    GinAggregate {
        input: Var,
        eps: Var,
        edges: Arc<EdgeList>,
        weights: Option<Var>,
    },
    Propagate(Var, Arc<SparseRows>),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        group: usize,
        xhat: Matrix,
        inv_std: Matrix,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Per-group statistics produced by a training-mode batch norm node.
#[derive(Debug, Clone)]
pub struct GroupStats {
    /// `groups x c` means.
    pub mean: Matrix,
    /// `groups x c` biased variances.
    pub var: Matrix,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose adjoint is not tracked.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose adjoint is collected by [`Tape::backward`].
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xm, rm) = (self.value(x), self.value(row));
        if rm.rows() != 1 || rm.cols() != xm.cols() {
            return Err(Error::dim("add_row", xm.shape(), rm.shape()));
        }
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// Scales group `b` (rows `b*group .. (b+1)*group`) of `x` by `factors[b]`.
    pub fn scale_groups(&mut self, x: Var, factors: Var, group: usize) -> Result<Var> {
        let (xm, fm) = (self.value(x), self.value(factors));
        if group == 0 || fm.cols() != 1 || fm.rows() * group != xm.rows() {
            return Err(Error::dim("scale_groups", xm.shape(), fm.shape()));
        }
        let mut value = xm.clone();
        for b in 0..fm.rows() {
            let f = fm.get(b, 0);
            for r in b * group..(b + 1) * group {
                value.row_mut(r).iter_mut().for_each(|v| *v *= f);
            }
        }
        Ok(self.push(value, Op::ScaleGroups(x, factors, group), &[x, factors]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Offset(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Logistic function, clamped so outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push(value, Op::Log(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::Empty("sum"));
        }
        let value = Matrix::scalar(self.value(x).sum());
        Ok(self.push(value, Op::Sum(x), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::Empty("mean_all"));
        }
        let value = Matrix::scalar(self.value(x).mean());
        Ok(self.push(value, Op::MeanAll(x), &[x]))
    }

    /// Column means: `n x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xm = self.value(x);
        if xm.rows() == 0 || xm.cols() == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let value = xm.col_sums().scale(1.0 / xm.rows() as f64);
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    /// Column means per group of `group` rows: `(B*group) x c -> B x c`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xm = self.value(x);
        if group == 0 || xm.cols() == 0 || xm.rows() == 0 {
            return Err(Error::Empty("group_mean"));
        }
        if !xm.rows().is_multiple_of(group) {
            return Err(Error::dim("group_mean", xm.shape(), (group, xm.cols())));
        }
        let groups = xm.rows() / group;
        let mut value = Matrix::zeros(groups, xm.cols());
        let inv = 1.0 / group as f64;
        for b in 0..groups {
            for r in b * group..(b + 1) * group {
                let src = xm.row(r).to_vec();
                for (o, v) in value.row_mut(b).iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(value, Op::GroupMean(x, group), &[x]))
    }

    /// Repeats every row of `x` `group` times: `B x c -> (B*group) x c`.
    pub fn group_broadcast(&mut self, x: Var, group: usize) -> Var {
        let xm = self.value(x);
        let mut value = Matrix::zeros(xm.rows() * group, xm.cols());
        for b in 0..xm.rows() {
            for r in b * group..(b + 1) * group {
                value.row_mut(r).copy_from_slice(xm.row(b));
            }
        }
        self.push(value, Op::GroupBroadcast(x, group), &[x])
    }

    /// GIN neighbourhood sum, per graph:
    /// `out[i] = (1 + eps) * x[i] + sum_{j ~ i} w_ij * x[j]`.
    ///
    /// `eps` is `1 x 1`. `weights`, when given, is a `1 x E` row holding one
    /// multiplier per undirected edge; absent weights mean all ones.
    pub fn gin_aggregate(
        &mut self,
        x: Var,
        eps: Var,
        edges: &Arc<EdgeList>,
        weights: Option<Var>,
    ) -> Result<Var> {
        let xm = self.value(x);
        let n = edges.nodes;
        if n == 0 || !xm.rows().is_multiple_of(n) {
            return Err(Error::Contract(format!(
                "feature matrix has {} rows, not a multiple of the graph's {n} nodes",
                xm.rows()
            )));
        }
        if self.value(eps).shape() != (1, 1) {
            return Err(Error::dim("gin_aggregate eps", self.shape(eps), (1, 1)));
        }
        if let Some(w) = weights {
            if self.shape(w) != (1, edges.edges.len()) {
                return Err(Error::dim(
                    "gin_aggregate weights",
                    self.shape(w),
                    (1, edges.edges.len()),
                ));
            }
        }
        let self_coef = 1.0 + self.scalar_value(eps);
        let w = weights.map(|w| self.value(w).as_slice());
        let value = gin_sum(xm, self_coef, edges, w);
        let mut parents = vec![x, eps];
        parents.extend(weights);
        Ok(self.push(
            value,
            Op::GinAggregate {
                input: x,
                eps,
                edges: Arc::clone(edges),
                weights,
            },
            &parents,
        ))
    }

    /// Applies a fixed sparse node operator to every graph in `x`.
    pub fn propagate(&mut self, x: Var, op: &Arc<SparseRows>) -> Result<Var> {
        let xm = self.value(x);
        if op.nodes == 0 || !xm.rows().is_multiple_of(op.nodes) {
            return Err(Error::Contract(format!(
                "feature matrix has {} rows, not a multiple of the graph's {} nodes",
                xm.rows(),
                op.nodes
            )));
        }
        let value = op.apply(xm, false);
        Ok(self.push(value, Op::Propagate(x, Arc::clone(op)), &[x]))
    }

    /// Training-mode batch normalization. Statistics are computed per column
    /// over each block of `group` consecutive rows. Returns the output node
    /// and the per-group statistics so callers can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group: usize,
    ) -> Result<(Var, GroupStats)> {
        let xm = self.value(x);
        let c = xm.cols();
        if group < 2 {
            return Err(Error::Contract(
                "batch norm in train mode needs at least 2 rows per group".into(),
            ));
        }
        if !xm.rows().is_multiple_of(group) || xm.rows() == 0 {
            return Err(Error::dim("batch_norm", xm.shape(), (group, c)));
        }
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(Error::dim("batch_norm affine", self.shape(p), (1, c)));
            }
        }
        let groups = xm.rows() / group;
        let mut mean = Matrix::zeros(groups, c);
        let mut var = Matrix::zeros(groups, c);
        let mut inv_std = Matrix::zeros(groups, c);
        let mut xhat = Matrix::zeros(xm.rows(), c);
        let nf = group as f64;
        for b in 0..groups {
            let rows = b * group..(b + 1) * group;
            for col in 0..c {
                let m = rows.clone().map(|r| xm.get(r, col)).sum::<f64>() / nf;
                let v = rows
                    .clone()
                    .map(|r| {
                        let d = xm.get(r, col) - m;
                        d * d
                    })
                    .sum::<f64>()
                    / nf;
                let is = 1.0 / (v + BN_EPS).sqrt();
                mean.set(b, col, m);
                var.set(b, col, v);
                inv_std.set(b, col, is);
                for r in rows.clone() {
                    xhat.set(r, col, (xm.get(r, col) - m) * is);
                }
            }
        }
        let value = affine_rows(&xhat, self.value(gamma), self.value(beta));
        let node = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                group,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((node, GroupStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Matrix,
        running_var: &Matrix,
    ) -> Result<Var> {
        let xm = self.value(x);
        let c = xm.cols();
        for m in [
            running_mean,
            running_var,
            self.value(gamma),
            self.value(beta),
        ] {
            if m.shape() != (1, c) {
                return Err(Error::dim("batch_norm_eval", xm.shape(), m.shape()));
            }
        }
        let inv_std = running_var.map(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = xm.clone();
        for r in 0..xhat.rows() {
            for ((o, m), s) in xhat
                .row_mut(r)
                .iter_mut()
                .zip(running_mean.as_slice())
                .zip(inv_std.as_slice())
            {
                *o = (*o - m) * s;
            }
        }
        let value = affine_rows(&xhat, self.value(gamma), self.value(beta));
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    gemm(1.0, g, false, bm, true, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(bm.rows(), bm.cols());
                    gemm(1.0, am, true, g, false, 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.hadamard(self.value(*b)).expect("shape checked at record");
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.hadamard(self.value(*a)).expect("shape checked at record");
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, g.col_sums());
                }
            }
            Op::ScaleGroups(x, factors, group) => {
                let fm = self.value(*factors);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for b in 0..fm.rows() {
                        let f = fm.get(b, 0);
                        for r in b * group..(b + 1) * group {
                            dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*factors) {
                    let xm = self.value(*x);
                    let mut df = Matrix::zeros(fm.rows(), 1);
                    for b in 0..fm.rows() {
                        let mut acc = 0.0;
                        for r in b * group..(b + 1) * group {
                            acc += g
                                .row(r)
                                .iter()
                                .zip(xm.row(r))
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        df.set(b, 0, acc);
                    }
                    self.accumulate(grads, *factors, df);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let d = g
                    .zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("same shape");
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .zip_map(&node.value, |g, s| g * s * (1.0 - s))
                    .expect("same shape");
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = g
                    .zip_map(
                        self.value(*x),
                        |g, x| if x > LOG_FLOOR { g / x } else { 0.0 },
                    )
                    .expect("same shape");
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = g
                    .zip_map(self.value(*x), |g, x| 2.0 * g * x)
                    .expect("same shape");
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::MeanAll(x) => {
                let (r, c) = self.shape(*x);
                let v = g.as_slice()[0] / (r * c) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, v));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let inv = 1.0 / r as f64;
                let d = Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv);
                self.accumulate(grads, *x, d);
            }
            Op::GroupMean(x, group) => {
                let (r, c) = self.shape(*x);
                let inv = 1.0 / *group as f64;
                let d = Matrix::from_fn(r, c, |i, j| g.get(i / group, j) * inv);
                self.accumulate(grads, *x, d);
            }
            Op::GroupBroadcast(x, group) => {
                let (r, c) = self.shape(*x);
                let mut d = Matrix::zeros(r, c);
                for b in 0..r {
                    for rr in b * group..(b + 1) * group {
                        for (o, v) in d.row_mut(b).iter_mut().zip(g.row(rr)) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GinAggregate {
                input,
                eps,
                edges,
                weights,
            } => {
                let self_coef = 1.0 + self.scalar_value(*eps);
                let w = weights.map(|w| self.value(w).as_slice());
                if self.wants(*input) {
                    // The aggregation matrix is symmetric, so its adjoint is itself.
                    let dx = gin_sum(g, self_coef, edges, w);
                    self.accumulate(grads, *input, dx);
                }
                let xm = self.value(*input);
                if self.wants(*eps) {
                    let de: f64 = g
                        .as_slice()
                        .iter()
                        .zip(xm.as_slice())
                        .map(|(a, b)| a * b)
                        .sum();
                    self.accumulate(grads, *eps, Matrix::scalar(de));
                }
                if let Some(wv) = weights {
                    if self.wants(*wv) {
                        let n = edges.nodes;
                        let groups = xm.rows() / n;
                        let mut dw = Matrix::zeros(1, edges.edges.len());
                        for (e, &(i, j)) in edges.edges.iter().enumerate() {
                            let mut acc = 0.0;
                            for b in 0..groups {
                                let (ri, rj) = (b * n + i, b * n + j);
                                acc += dot(g.row(ri), xm.row(rj)) + dot(g.row(rj), xm.row(ri));
                            }
                            dw.as_mut_slice()[e] = acc;
                        }
                        self.accumulate(grads, *wv, dw);
                    }
                }
            }
            Op::Propagate(x, op) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, op.apply(g, true));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                group,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let c = xhat.cols();
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, c);
                    for r in 0..xhat.rows() {
                        for ((o, gv), xv) in
                            dg.as_mut_slice().iter_mut().zip(g.row(r)).zip(xhat.row(r))
                        {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, g.col_sums());
                }
                if self.wants(*input) {
                    let nf = *group as f64;
                    let groups = xhat.rows() / group;
                    let mut dx = Matrix::zeros(xhat.rows(), c);
                    for b in 0..groups {
                        let rows = b * group..(b + 1) * group;
                        for col in 0..c {
                            let gamma_c = gm.get(0, col);
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for r in rows.clone() {
                                let d = g.get(r, col) * gamma_c;
                                sum_d += d;
                                sum_dx += d * xhat.get(r, col);
                            }
                            let is = inv_std.get(b, col);
                            for r in rows.clone() {
                                let d = g.get(r, col) * gamma_c;
                                let v = is / nf * (nf * d - sum_d - xhat.get(r, col) * sum_dx);
                                dx.set(r, col, v);
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                if self.wants(*gamma) {
                    let dg = g.hadamard(xhat).expect("same shape").col_sums();
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, g.col_sums());
                }
                if self.wants(*input) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for ((o, s), gg) in dx
                            .row_mut(r)
                            .iter_mut()
                            .zip(inv_std.as_slice())
                            .zip(gm.as_slice())
                        {
                            *o *= s * gg;
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function clamped to the open unit interval.
pub fn sigmoid(x: f64) -> f64 {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, HI)
}

fn affine_rows(xhat: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, g), b) in out
            .row_mut(r)
            .iter_mut()
            .zip(gamma.as_slice())
            .zip(beta.as_slice())
        {
            *o = *o * g + b;
        }
    }
    out
}

fn gin_sum(x: &Matrix, self_coef: f64, edges: &EdgeList, weights: Option<&[f64]>) -> Matrix {
    let n = edges.nodes;
    let groups = x.rows() / n;
    let mut out = x.scale(self_coef);
    for b in 0..groups {
        let base = b * n;
        for (e, &(i, j)) in edges.edges.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[e]);
            for (dst, src) in [(i, j), (j, i)] {
                let src_row = x.row(base + src);
                for (o, s) in out.row_mut(base + dst).iter_mut().zip(src_row) {
                    *o += w * s;
                }
            }
        }
    }
    out
}
