//! Neural building blocks. Layers hold [`ParamId`]s; all numbers live in a
//! [`ParamStore`] and every forward pass runs inside a [`Session`].
//!
//! Graph layers work on a stacked batch: `B` graphs of `v` nodes form a
//! `(B*v) x c` feature matrix, graph `b` owning rows `b*v .. (b+1)*v`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sparse::{EdgeList, SparseRows};
use crate::math::{uniform_init, Matrix, Mode, ParamId, ParamStore, Session, Var};

/// Fully connected layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, input, output, input),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_init(rng, 1, output, input),
            true,
        );
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        let xw = sess.tape.matmul(x, w)?;
        sess.tape.add_row(xw, b)
    }
}

/// Dense layers with ReLU between them and none after the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        widths: &[usize],
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, sess: &mut Session<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(sess, x)?;
            if i < last {
                x = sess.tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Which rows share batch-norm statistics in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormAxis {
    /// Statistics over the `v` nodes of each graph separately.
    #[default]
    PerGraph,
    /// Statistics over all nodes of all graphs in the batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::ones(1, channels), true),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, channels), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Matrix::zeros(1, channels),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Matrix::ones(1, channels),
                false,
            ),
            channels,
        }
    }

    /// In train mode `group` rows share statistics and running averages are
    /// queued on the session. Eval mode uses the running statistics only.
    pub fn forward(&self, sess: &mut Session<'_>, x: Var, group: usize) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        match sess.mode() {
            Mode::Train => {
                let (out, stats) = sess.tape.batch_norm(x, gamma, beta, group)?;
                sess.record_bn_stats(self.running_mean, self.running_var, &stats, group);
                Ok(out)
            }
            Mode::Eval => {
                let store = sess.store();
                sess.tape.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    store.get(self.running_mean),
                    store.get(self.running_var),
                )
            }
        }
    }
}

/// Graph isomorphism layer: `h_i <- MLP((1 + eps) h_i + sum_{j ~ i} h_j)`,
/// optionally followed by ReLU and batch norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GinLayer {
    pub eps: ParamId,
    pub mlp: Mlp,
    pub norm: Option<BatchNorm>,
}

impl GinLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        with_norm: bool,
    ) -> Self {
        let eps = store.add(format!("{name}.eps"), Matrix::scalar(0.0), true);
        let mlp = Mlp::new(store, rng, &format!("{name}.mlp"), widths);
        let norm =
            with_norm.then(|| BatchNorm::new(store, &format!("{name}.norm"), mlp.output_width()));
        Self { eps, mlp, norm }
    }

    /// `mask` optionally weights every undirected edge (a `1 x E` row).
    pub fn forward(
        &self,
        sess: &mut Session<'_>,
        h: Var,
        edges: &Arc<EdgeList>,
        mask: Option<Var>,
        norm_group: usize,
    ) -> Result<Var> {
        let eps = sess.param(self.eps);
        let agg = sess.tape.gin_aggregate(h, eps, edges, mask)?;
        let mut out = self.mlp.forward(sess, agg)?;
        if let Some(norm) = &self.norm {
            out = sess.tape.relu(out);
            out = norm.forward(sess, out, norm_group)?;
        }
        Ok(out)
    }
}

/// Graph convolution `ReLU(D^{-1/2} (A + I) D^{-1/2} h W + b)`, optionally
/// followed by batch norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub linear: DenseLayer,
    pub norm: Option<BatchNorm>,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        with_norm: bool,
    ) -> Self {
        let linear = DenseLayer::new(store, rng, &format!("{name}.linear"), input, output);
        let norm = with_norm.then(|| BatchNorm::new(store, &format!("{name}.norm"), output));
        Self { linear, norm }
    }

    pub fn forward(
        &self,
        sess: &mut Session<'_>,
        h: Var,
        op: &Arc<SparseRows>,
        norm_group: usize,
    ) -> Result<Var> {
        let agg = sess.tape.propagate(h, op)?;
        let lin = self.linear.forward(sess, agg)?;
        let mut out = sess.tape.relu(lin);
        if let Some(norm) = &self.norm {
            out = norm.forward(sess, out, norm_group)?;
        }
        Ok(out)
    }
}

/// Per-graph column means: `(B*v) x r -> B x r`.
pub fn global_mean_pool(sess: &mut Session<'_>, h: Var, nodes: usize) -> Result<Var> {
    if nodes == 0 {
        return Err(Error::Empty("global_mean_pool"));
    }
    sess.tape.group_mean(h, nodes)
}
