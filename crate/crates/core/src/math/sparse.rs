//! Fixed node-to-node operators applied independently to every graph in a
//! stacked batch. A batch of `B` graphs with `n` nodes each is a `(B*n) x c`
//! matrix; graph `b` owns rows `b*n .. (b+1)*n`.

use std::sync::Arc;

use crate::math::Matrix;

/// Undirected edge list over `n` nodes, edges stored once with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl EdgeList {
    pub fn new(nodes: usize, edges: Vec<(usize, usize)>) -> Arc<Self> {
        debug_assert!(edges.iter().all(|&(i, j)| i < j && j < nodes));
        Arc::new(Self { nodes, edges })
    }
}

/// Row-sparse linear operator: `out[i] = sum_j coef(i, j) * x[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub nodes: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    /// Applies the operator (or its transpose) to every graph in `x`.
    pub fn apply(&self, x: &Matrix, transpose: bool) -> Matrix {
        let n = self.nodes;
        let c = x.cols();
        let groups = x.rows() / n;
        let mut out = Matrix::zeros(x.rows(), c);
        for g in 0..groups {
            let base = g * n;
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, w) in row {
                    let (dst, src) = if transpose { (j, i) } else { (i, j) };
                    let src_row = x.row(base + src);
                    let out_row = out.row_mut(base + dst);
                    for (o, s) in out_row.iter_mut().zip(src_row) {
                        *o += w * s;
                    }
                }
            }
        }
        out
    }
}
