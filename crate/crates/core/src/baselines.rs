//! Comparison methods: ordinary least squares over the whole flattened
//! subject (direct) or per ROI, and a one-hidden-layer MLP regressor. The
//! GI and GCN ablations are configurations of [`crate::model`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DatasetSchema};
use crate::error::{Error, Result};
use crate::layers::Mlp;
use crate::math::{AdamConfig, AdamState, Matrix, Mode, ParamStore, Session};
use crate::model::checkpoint::Container;
use crate::model::{imputation_loss, Imputer};

pub const LINEAR_KIND: &str = "linear";
pub const MLP_KIND: &str = "mlp-regressor";
/// Added to the diagonal of a standardized Gram matrix found singular.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearScope {
    /// Flattened `v*p` inputs to flattened `v*q` outputs.
    Direct,
    /// An independent `p -> q` map for every ROI.
    PerRoi,
}

/// Least-squares fit `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Matrix,
    pub ridge_used: bool,
}

impl LinearMap {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// In-place Cholesky factorization; `None` if `a` is not numerically
/// positive definite.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    let scale = (0..n).map(|i| a.get(i, i)).fold(0.0f64, f64::max);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 1e-12 * scale.max(1e-300)) {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Ordinary least squares on centered, unit-scaled columns via the normal
/// equations, falling back to a tiny ridge when the Gram matrix is
/// singular.
pub fn least_squares(x: &Matrix, y: &Matrix) -> Result<LinearMap> {
    let (n, d) = x.shape();
    if y.rows() != n {
        return Err(Error::dim("least_squares", x.shape(), y.shape()));
    }
    if n < 2 {
        return Err(Error::Contract(format!(
            "least squares needs at least 2 samples, got {n}"
        )));
    }
    let col_mean = |m: &Matrix| m.col_sums().scale(1.0 / n as f64);
    let (xm, ym) = (col_mean(x), col_mean(y));
    let mut scale = vec![0.0; d];
    for r in 0..n {
        for (c, s) in scale.iter_mut().enumerate() {
            let v = x.get(r, c) - xm.get(0, c);
            *s += v * v;
        }
    }
    let scale: Vec<f64> = scale
        .into_iter()
        .map(|s| if s > 0.0 { (s / n as f64).sqrt() } else { 1.0 })
        .collect();
    let xs = Matrix::from_fn(n, d, |r, c| (x.get(r, c) - xm.get(0, c)) / scale[c]);
    let yc = Matrix::from_fn(n, y.cols(), |r, c| y.get(r, c) - ym.get(0, c));
    let xt = xs.transpose();
    let gram = xt.matmul(&xs)?.scale(1.0 / n as f64);
    let rhs = xt.matmul(&yc)?.scale(1.0 / n as f64);
    let (l, ridge_used) = match cholesky(&gram) {
        Some(l) => (l, false),
        None => {
            let mut g = gram.clone();
            for i in 0..d {
                g.set(i, i, g.get(i, i) + RIDGE);
            }
            let l = cholesky(&g).ok_or_else(|| {
                Error::Training("normal equations remain singular after ridge".into())
            })?;
            (l, true)
        }
    };
    let ws = cholesky_solve(&l, &rhs);
    let weight = Matrix::from_fn(d, y.cols(), |r, c| ws.get(r, c) / scale[r]);
    let bias = ym.sub(&xm.matmul(&weight)?)?;
    Ok(LinearMap {
        weight,
        bias,
        ridge_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub scope: LinearScope,
    pub schema: DatasetSchema,
    /// One map for `Direct`, one per ROI for `PerRoi`.
    pub maps: Vec<LinearMap>,
}

fn training_blocks(data: &Dataset) -> Result<(Vec<&Matrix>, Vec<&Matrix>)> {
    let mut xs = Vec::with_capacity(data.len());
    let mut ys = Vec::with_capacity(data.len());
    for s in &data.subjects {
        xs.push(&s.shared);
        ys.push(
            s.target
                .as_ref()
                .ok_or_else(|| Error::Schema(format!("subject {} has no target block", s.id)))?,
        );
    }
    Ok((xs, ys))
}

fn flatten_rows(blocks: &[&Matrix]) -> Matrix {
    let width = blocks.first().map_or(0, |b| b.len());
    Matrix::from_fn(blocks.len(), width, |r, c| blocks[r].as_slice()[c])
}

pub fn fit_linear(data: &Dataset, scope: LinearScope) -> Result<LinearModel> {
    if data.len() < 2 {
        return Err(Error::Contract(format!(
            "linear regression needs at least 2 training subjects, got {}",
            data.len()
        )));
    }
    let (xs, ys) = training_blocks(data)?;
    let v = data.schema.roi_names.len();
    let maps = match scope {
        LinearScope::Direct => vec![least_squares(&flatten_rows(&xs), &flatten_rows(&ys))?],
        LinearScope::PerRoi => (0..v)
            .map(|roi| {
                let x = Matrix::from_fn(xs.len(), xs[0].cols(), |r, c| xs[r].get(roi, c));
                let y = Matrix::from_fn(ys.len(), ys[0].cols(), |r, c| ys[r].get(roi, c));
                least_squares(&x, &y)
            })
            .collect::<Result<_>>()?,
    };
    Ok(LinearModel {
        scope,
        schema: DatasetSchema {
            confounds: Vec::new(),
            ..data.schema.clone()
        },
        maps,
    })
}

fn check_block(schema: &DatasetSchema, x: &Matrix) -> Result<()> {
    let want = (schema.roi_names.len(), schema.shared.len());
    if x.shape() != want {
        return Err(Error::Schema(format!(
            "expected a {}x{} shared block, got {}x{}",
            want.0,
            want.1,
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

impl LinearModel {
    pub fn ridge_used(&self) -> bool {
        self.maps.iter().any(|m| m.ridge_used)
    }

    pub fn to_container(&self) -> Result<Container> {
        Container::new(
            LINEAR_KIND,
            self.schema.shared_fingerprint(),
            self,
            Vec::new(),
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(LINEAR_KIND)?;
        c.meta()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }
}

impl Imputer for LinearModel {
    fn predict(&self, shared: &Matrix) -> Result<Matrix> {
        check_block(&self.schema, shared)?;
        let (v, q) = (self.schema.roi_names.len(), self.schema.target.len());
        match self.scope {
            LinearScope::Direct => {
                let flat = Matrix::from_vec(1, shared.len(), shared.as_slice().to_vec())?;
                self.maps[0].apply(&flat)?.reshape(v, q)
            }
            LinearScope::PerRoi => {
                let mut out = Matrix::zeros(v, q);
                for (roi, map) in self.maps.iter().enumerate() {
                    let x = Matrix::from_vec(1, shared.cols(), shared.row(roi).to_vec())?;
                    out.row_mut(roi).copy_from_slice(map.apply(&x)?.as_slice());
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            epochs: 300,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Dense network from the flattened, column-standardized shared block to
/// the flattened target block.
#[derive(Debug, Clone)]
pub struct MlpRegressor {
    pub config: MlpConfig,
    pub schema: DatasetSchema,
    mean: Vec<f64>,
    sd: Vec<f64>,
    store: ParamStore,
    mlp: Mlp,
}

#[derive(Serialize, Deserialize)]
struct MlpMeta {
    config: MlpConfig,
    schema: DatasetSchema,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl MlpRegressor {
    fn build(schema: &DatasetSchema, config: &MlpConfig) -> Self {
        let v = schema.roi_names.len();
        let mut widths = vec![v * schema.shared.len()];
        widths.extend(&config.hidden);
        widths.push(v * schema.target.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "mlp", &widths);
        let d = widths[0];
        Self {
            config: config.clone(),
            schema: DatasetSchema {
                confounds: Vec::new(),
                ..schema.clone()
            },
            mean: vec![0.0; d],
            sd: vec![1.0; d],
            store,
            mlp,
        }
    }

    fn standardize(&self, flat: &Matrix) -> Matrix {
        Matrix::from_fn(flat.rows(), flat.cols(), |r, c| {
            (flat.get(r, c) - self.mean[c]) / self.sd[c]
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = MlpMeta {
            config: self.config.clone(),
            schema: self.schema.clone(),
            mean: self.mean.clone(),
            sd: self.sd.clone(),
        };
        let tensors = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        Container::new(MLP_KIND, self.schema.shared_fingerprint(), &meta, tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(MLP_KIND)?;
        let meta: MlpMeta = c.meta()?;
        let mut m = Self::build(&meta.schema, &meta.config);
        m.store.load_values(c.tensors.clone())?;
        m.mean = meta.mean;
        m.sd = meta.sd;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }
}

impl Imputer for MlpRegressor {
    fn predict(&self, shared: &Matrix) -> Result<Matrix> {
        check_block(&self.schema, shared)?;
        let flat = Matrix::from_vec(1, shared.len(), shared.as_slice().to_vec())?;
        let mut sess = Session::frozen(&self.store, Mode::Eval);
        let x = sess.tape.constant(self.standardize(&flat));
        let y = self.mlp.forward(&mut sess, x)?;
        sess.tape
            .value(y)
            .clone()
            .reshape(self.schema.roi_names.len(), self.schema.target.len())
    }
}

/// Adam on per-subject squared error, averaged over each mini-batch.
pub fn fit_mlp_regressor(data: &Dataset, config: &MlpConfig) -> Result<MlpRegressor> {
    if data.is_empty() {
        return Err(Error::Empty("fit_mlp_regressor"));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config(
            "MLP batch size and learning rate must be positive".into(),
        ));
    }
    let (xs, ys) = training_blocks(data)?;
    let mut model = MlpRegressor::build(&data.schema, config);
    let x = flatten_rows(&xs);
    let y = flatten_rows(&ys);
    let n = x.rows();
    for c in 0..x.cols() {
        let m = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x.get(r, c) - m).powi(2)).sum::<f64>() / n as f64;
        model.mean[c] = m;
        model.sd[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let xs = model.standardize(&x);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..n).collect();
    let bs = config.batch_size.min(n);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let xb = Matrix::from_fn(chunk.len(), xs.cols(), |r, c| xs.get(chunk[r], c));
            let yb = Matrix::from_fn(chunk.len(), y.cols(), |r, c| y.get(chunk[r], c));
            let mut sess = Session::new(&model.store, Mode::Train);
            let xv = sess.tape.constant(xb);
            let yv = sess.tape.constant(yb);
            let pred = model.mlp.forward(&mut sess, xv)?;
            let loss = imputation_loss(&mut sess.tape, pred, yv, chunk.len())?;
            if !sess.tape.scalar_value(loss).is_finite() {
                return Err(Error::Training(format!(
                    "non-finite MLP loss at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let grads = sess.tape.backward(loss)?;
            let pg = sess.param_grads(&grads);
            drop(sess);
            adam.step(&mut model.store, &pg)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_recovered() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]);
        let y = x.map(|v| 2.0 * v - 1.0);
        let fit = least_squares(&x, &y).unwrap();
        assert!((fit.weight.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((fit.bias.get(0, 0) + 1.0).abs() < 1e-12);
        assert!(!fit.ridge_used);
    }

    #[test]
    fn duplicate_columns_trigger_ridge() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [4.0, 4.0]]);
        let y = x.slice_rows(0, 4).map(|v| 3.0 * v);
        let fit = least_squares(&x, &Matrix::from_fn(4, 1, |r, _| y.get(r, 0))).unwrap();
        assert!(fit.ridge_used);
        let pred = fit.apply(&x).unwrap();
        for r in 0..4 {
            assert!((pred.get(r, 0) - 3.0 * x.get(r, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(least_squares(&Matrix::ones(1, 1), &Matrix::ones(1, 1)).is_err());
    }
}
