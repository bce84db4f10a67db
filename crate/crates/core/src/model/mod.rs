//! The DAGI network: a GIN encoder over the ROI graph, a GIN decoder that
//! predicts the missing measurements, and a demographic classifier on the
//! mean-pooled node embeddings. Training minimizes
//! `L_imp + lambda * L_cls`.
//!
//! The GI ablation is the same network trained without the classifier. A
//! GCN backbone replaces every GIN aggregation with symmetric-normalized
//! propagation.

pub mod checkpoint;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DatasetSchema, Predictions};
use crate::error::{Error, Result};
use crate::graph::RoiGraph;
use crate::layers::{global_mean_pool, GcnLayer, GinLayer, Mlp, NormAxis};
use crate::math::sparse::SparseRows;
use crate::math::tape::Tape;
use crate::math::{AdamConfig, AdamState, Matrix, Mode, ParamStore, Session, Var};
use checkpoint::Container;

/// Node embedding width.
pub const EMBED_DIM: usize = 32;
/// Hidden width of the classifier head.
pub const CLASSIFIER_HIDDEN: usize = 16;
pub const CHECKPOINT_KIND: &str = "dagi-gnn";

/// Anything that maps a subject's shared block (`v x p`, raw units) to a
/// predicted target block (`v x q`, raw units).
pub trait Imputer: Send + Sync {
    fn predict(&self, shared: &Matrix) -> Result<Matrix>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    #[default]
    Gin,
    Gcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_cls: f64,
    pub seed: u64,
    pub classifier_enabled: bool,
    pub backbone: Backbone,
    pub norm_axis: NormAxis,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 300,
            lambda_cls: 1.0,
            seed: 0,
            classifier_enabled: true,
            backbone: Backbone::Gin,
            norm_axis: NormAxis::Batch,
        }
    }
}

impl TrainConfig {
    /// The GI ablation: imputation loss only.
    pub fn gi() -> Self {
        Self {
            classifier_enabled: false,
            ..Self::default()
        }
    }

    pub fn gcn() -> Self {
        Self {
            classifier_enabled: false,
            backbone: Backbone::Gcn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return Err(Error::Config(format!(
                "lambda-cls must be non-negative, got {}",
                self.lambda_cls
            )));
        }
        Ok(())
    }
}

/// Per-measurement z-scoring, pooled over ROIs and subjects so that
/// between-region differences survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            sd: vec![1.0; p],
        }
    }

    pub fn fit(blocks: &[&Matrix]) -> Result<Self> {
        let first = blocks.first().ok_or(Error::Empty("Standardizer::fit"))?;
        let p = first.cols();
        let mut mean = vec![0.0; p];
        let mut count = 0usize;
        for b in blocks {
            for r in 0..b.rows() {
                for (m, v) in mean.iter_mut().zip(b.row(r)) {
                    *m += v;
                }
            }
            count += b.rows();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; p];
        for b in blocks {
            for r in 0..b.rows() {
                for ((s, v), m) in var.iter_mut().zip(b.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let sd = var
            .into_iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            (x.get(r, c) - self.mean[c]) / self.sd[c]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EncoderLayer {
    Gin(GinLayer),
    Gcn(GcnLayer),
}

#[derive(Debug, Clone, PartialEq)]
enum Decoder {
    Gin(GinLayer),
    /// Normalized propagation followed by the same 4-layer MLP.
    Gcn(Mlp),
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    encoder: Vec<EncoderLayer>,
    decoder: Decoder,
    classifier: Mlp,
}

/// Tape handles produced by one forward pass over a stacked batch.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutputs {
    /// `(B*v) x q` predictions in raw units.
    pub imputed: Var,
    /// `(B*v) x 32` output of the last encoder layer.
    pub embeddings: Var,
    /// `B x 1` label probabilities, when the classifier was evaluated.
    pub prob: Option<Var>,
}

/// One subject's eval-mode outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub imputed: Matrix,
    /// `None` for models trained without the classifier.
    pub sex_prob: Option<f64>,
    pub embeddings: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub imputation: f64,
    pub classification: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub imputation: f64,
    pub classification: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
}

impl TrainLog {
    /// `epoch,L_imp,L_cls,L_total`, with `L_cls` empty when the classifier
    /// was off.
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "L_imp", "L_cls", "L_total"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.imputation.to_string(),
                e.classification.map(|c| c.to_string()).unwrap_or_default(),
                e.total.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }
}

/// Sum of squared errors over a stacked batch divided by the number of
/// subjects in it.
pub fn imputation_loss(tape: &mut Tape, pred: Var, truth: Var, batch: usize) -> Result<Var> {
    if batch == 0 {
        return Err(Error::Empty("imputation_loss"));
    }
    let diff = tape.sub(pred, truth)?;
    let sq = tape.square(diff);
    let sse = tape.sum(sq)?;
    Ok(tape.scale(sse, 1.0 / batch as f64))
}

/// Mean binary cross-entropy `-[y ln g + (1 - y) ln(1 - g)]` over a `B x 1`
/// column of probabilities. Logs are floored so the loss stays finite.
pub fn classifier_loss(tape: &mut Tape, prob: Var, labels: &[u8]) -> Result<Var> {
    let (rows, cols) = tape.shape(prob);
    if cols != 1 || rows != labels.len() {
        return Err(Error::dim(
            "classifier_loss",
            (rows, cols),
            (labels.len(), 1),
        ));
    }
    if rows == 0 {
        return Err(Error::Empty("classifier_loss"));
    }
    let y = Matrix::from_fn(rows, 1, |r, _| labels[r] as f64);
    let not_y = y.map(|v| 1.0 - v);
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);
    let log_p = tape.log(prob);
    let neg = tape.scale(prob, -1.0);
    let one_minus = tape.offset(neg, 1.0);
    let log_q = tape.log(one_minus);
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let s = tape.sum(ll)?;
    Ok(tape.scale(s, -1.0 / rows as f64))
}

/// Squared Euclidean distance between two blocks.
pub fn imputation_loss_value(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    Ok(pred.sub(truth)?.as_slice().iter().map(|d| d * d).sum())
}

pub fn classifier_loss_value(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(
        crate::math::tape::LOG_FLOOR,
        1.0 - crate::math::tape::LOG_FLOOR,
    );
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Debug, Clone)]
pub struct DagiModel {
    config: TrainConfig,
    schema: DatasetSchema,
    graph: RoiGraph,
    gcn_op: Arc<SparseRows>,
    standardizer: Standardizer,
    store: ParamStore,
    net: Network,
    trained: bool,
    final_losses: Option<EpochLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    schema: DatasetSchema,
    graph_edges: Vec<(usize, usize)>,
    standardizer: Standardizer,
    trained: bool,
    final_losses: Option<EpochLog>,
    embed_dim: usize,
    classifier_hidden: usize,
}

fn schema_diff(expected: &DatasetSchema, found: &DatasetSchema) -> String {
    let mut parts = Vec::new();
    if expected.roi_names != found.roi_names {
        let missing: Vec<&String> = expected
            .roi_names
            .iter()
            .filter(|r| !found.roi_names.contains(r))
            .collect();
        let extra: Vec<&String> = found
            .roi_names
            .iter()
            .filter(|r| !expected.roi_names.contains(r))
            .collect();
        parts.push(format!(
            "ROIs differ (model has {}, data has {}; missing {:?}, unexpected {:?})",
            expected.roi_names.len(),
            found.roi_names.len(),
            missing,
            extra
        ));
    }
    if expected.shared != found.shared {
        parts.push(format!(
            "shared measurements differ: model {:?}, data {:?}",
            expected.shared, found.shared
        ));
    }
    parts.join("; ")
}

impl DagiModel {
    /// A freshly initialized model. Initialization draws from the seed in
    /// `config`, encoder first and classifier last, so runs with and
    /// without the classifier start from identical encoder and decoder
    /// weights.
    pub fn new(schema: &DatasetSchema, graph: &RoiGraph, config: &TrainConfig) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        if schema.roi_names != graph.names() {
            return Err(Error::Schema(format!(
                "graph nodes do not match the schema ROIs: {}",
                schema_diff(
                    &DatasetSchema {
                        roi_names: graph.names().to_vec(),
                        ..schema.clone()
                    },
                    schema
                )
            )));
        }
        if schema.target.is_empty() {
            return Err(Error::Schema(
                "the schema has no target measurements".into(),
            ));
        }
        let (p, q) = (schema.shared.len(), schema.target.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let r = EMBED_DIM;
        let (encoder, decoder) = match config.backbone {
            Backbone::Gin => (
                vec![
                    EncoderLayer::Gin(GinLayer::new(
                        &mut store,
                        &mut rng,
                        "enc0",
                        &[p, r, r],
                        true,
                    )),
                    EncoderLayer::Gin(GinLayer::new(
                        &mut store,
                        &mut rng,
                        "enc1",
                        &[r, r, r],
                        true,
                    )),
                ],
                Decoder::Gin(GinLayer::new(
                    &mut store,
                    &mut rng,
                    "dec",
                    &[r, r, r, r, q],
                    false,
                )),
            ),
            Backbone::Gcn => (
                vec![
                    EncoderLayer::Gcn(GcnLayer::new(&mut store, &mut rng, "enc0", p, r, true)),
                    EncoderLayer::Gcn(GcnLayer::new(&mut store, &mut rng, "enc1", r, r, true)),
                ],
                Decoder::Gcn(Mlp::new(&mut store, &mut rng, "dec.mlp", &[r, r, r, r, q])),
            ),
        };
        let classifier = Mlp::new(&mut store, &mut rng, "cls", &[r, CLASSIFIER_HIDDEN, 1]);
        Ok(Self {
            config: config.clone(),
            schema: DatasetSchema {
                label_column: schema.label_column.clone(),
                confounds: Vec::new(),
                ..schema.clone()
            },
            graph: graph.clone(),
            gcn_op: graph.gcn_operator(),
            standardizer: Standardizer::identity(p),
            store,
            net: Network {
                encoder,
                decoder,
                classifier,
            },
            trained: false,
            final_losses: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// ROI names, shared and target measurement names the model was built
    /// for.
    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn graph(&self) -> &RoiGraph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn classifier_enabled(&self) -> bool {
        self.config.classifier_enabled
    }

    pub fn final_losses(&self) -> Option<&EpochLog> {
        self.final_losses.as_ref()
    }

    pub fn fingerprint(&self) -> String {
        self.schema.shared_fingerprint()
    }

    fn norm_group(&self, batch: usize) -> usize {
        let v = self.graph.node_count();
        match self.config.norm_axis {
            NormAxis::PerGraph => v,
            NormAxis::Batch => v * batch,
        }
    }

    /// Runs the network on a stacked, already standardized batch.
    /// `mask` weights every undirected edge in all GIN aggregations.
    pub fn forward_vars(
        &self,
        sess: &mut Session<'_>,
        x: Var,
        batch: usize,
        mask: Option<Var>,
        with_classifier: bool,
    ) -> Result<GraphOutputs> {
        let group = self.norm_group(batch);
        let edges = self.graph.edge_list();
        if mask.is_some() && self.config.backbone == Backbone::Gcn {
            return Err(Error::Contract(
                "edge masks apply to GIN models only".into(),
            ));
        }
        let mut h = x;
        for layer in &self.net.encoder {
            h = match layer {
                EncoderLayer::Gin(l) => l.forward(sess, h, edges, mask, group)?,
                EncoderLayer::Gcn(l) => l.forward(sess, h, &self.gcn_op, group)?,
            };
        }
        let imputed = match &self.net.decoder {
            Decoder::Gin(l) => l.forward(sess, h, edges, mask, group)?,
            Decoder::Gcn(mlp) => {
                let agg = sess.tape.propagate(h, &self.gcn_op)?;
                mlp.forward(sess, agg)?
            }
        };
        let prob = if with_classifier {
            let pooled = global_mean_pool(sess, h, self.graph.node_count())?;
            let logit = self.net.classifier.forward(sess, pooled)?;
            Some(sess.tape.sigmoid(logit))
        } else {
            None
        };
        Ok(GraphOutputs {
            imputed,
            embeddings: h,
            prob,
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = (self.graph.node_count(), self.schema.shared.len());
        if x.shape() != want {
            return Err(Error::Schema(format!(
                "expected a {}x{} shared block (ROIs x shared measurements), got {}x{}",
                want.0,
                want.1,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Standardizes and stacks raw shared blocks.
    pub fn prepare_inputs(&self, xs: &[&Matrix]) -> Result<Matrix> {
        let mut parts = Vec::with_capacity(xs.len());
        for x in xs {
            self.check_input(x)?;
            parts.push(self.standardizer.apply(x));
        }
        Matrix::vstack(&parts.iter().collect::<Vec<_>>())
    }

    /// Eval-mode outputs for several subjects in one stacked pass.
    pub fn forward_batch(&self, xs: &[&Matrix]) -> Result<Vec<Forward>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let stacked = self.prepare_inputs(xs)?;
        let mut sess = Session::frozen(&self.store, Mode::Eval);
        let x = sess.tape.constant(stacked);
        let out = self.forward_vars(&mut sess, x, xs.len(), None, self.classifier_enabled())?;
        let v = self.graph.node_count();
        let imputed = sess.tape.value(out.imputed);
        let emb = sess.tape.value(out.embeddings);
        let probs = out.prob.map(|p| sess.tape.value(p).clone());
        Ok((0..xs.len())
            .map(|b| Forward {
                imputed: imputed.slice_rows(b * v, v),
                sex_prob: probs.as_ref().map(|p| p.get(b, 0)),
                embeddings: emb.slice_rows(b * v, v),
            })
            .collect())
    }

    /// Eval-mode outputs for one subject's raw shared block (`v x p`).
    pub fn forward(&self, x_shared: &Matrix) -> Result<Forward> {
        Ok(self.forward_batch(&[x_shared])?.remove(0))
    }

    /// Probability of label 1. Refused for models trained without the
    /// classifier.
    pub fn sex_probability(&self, x_shared: &Matrix) -> Result<f64> {
        if !self.classifier_enabled() {
            return Err(Error::Contract(
                "model was trained without the demographic classifier".into(),
            ));
        }
        Ok(self
            .forward(x_shared)?
            .sex_prob
            .expect("classifier enabled"))
    }

    /// Refuses data whose ROI or shared measurement layout differs from
    /// the model's.
    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<()> {
        if schema.shared_fingerprint() != self.fingerprint() {
            return Err(Error::Schema(format!(
                "data does not match the model: {}",
                schema_diff(&self.schema, schema)
            )));
        }
        Ok(())
    }

    /// Predicted target blocks for every subject, in input order. The
    /// input is not modified; target blocks it may carry are ignored.
    pub fn impute(&self, data: &Dataset) -> Result<Predictions> {
        self.check_schema(&data.schema)?;
        let mut values = Vec::with_capacity(data.len());
        let mut probs = Vec::with_capacity(data.len());
        for s in &data.subjects {
            let f = self.forward(&s.shared)?;
            values.push(f.imputed);
            probs.extend(f.sex_prob);
        }
        Ok(Predictions {
            tag: None,
            measurements: self.schema.target.clone(),
            ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
            values,
            label_prob: self.classifier_enabled().then_some(probs),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            schema: self.schema.clone(),
            graph_edges: self.graph.edges().to_vec(),
            standardizer: self.standardizer.clone(),
            trained: self.trained,
            final_losses: self.final_losses.clone(),
            embed_dim: EMBED_DIM,
            classifier_hidden: CLASSIFIER_HIDDEN,
        };
        let tensors = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        Container::new(CHECKPOINT_KIND, self.fingerprint(), &meta, tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = c.meta()?;
        if meta.embed_dim != EMBED_DIM || meta.classifier_hidden != CLASSIFIER_HIDDEN {
            return Err(Error::Checkpoint(format!(
                "unsupported layer widths {}/{}",
                meta.embed_dim, meta.classifier_hidden
            )));
        }
        if meta.schema.shared_fingerprint() != c.fingerprint {
            return Err(Error::Checkpoint(
                "schema fingerprint does not match the stored schema".into(),
            ));
        }
        let graph = RoiGraph::new(meta.schema.roi_names.clone(), meta.graph_edges.clone())?;
        let mut model = Self::new(&meta.schema, &graph, &meta.config)?;
        model.store.load_values(c.tensors.clone())?;
        if meta.standardizer.mean.len() != meta.schema.shared.len()
            || meta.standardizer.sd.len() != meta.schema.shared.len()
        {
            return Err(Error::Checkpoint("standardizer width mismatch".into()));
        }
        model.standardizer = meta.standardizer;
        model.trained = meta.trained;
        model.final_losses = meta.final_losses;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Imputer for DagiModel {
    fn predict(&self, shared: &Matrix) -> Result<Matrix> {
        Ok(self.forward(shared)?.imputed)
    }
}

/// Trains a model on a cohort that carries both blocks (and labels when
/// the classifier is enabled). Shuffling uses its own stream derived from
/// the seed, so a fixed seed reproduces the run bit for bit.
pub fn train(
    data: &Dataset,
    graph: &RoiGraph,
    config: &TrainConfig,
) -> Result<(DagiModel, TrainLog)> {
    let mut model = DagiModel::new(&data.schema, graph, config)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("train"));
    }
    if config.batch_size > n {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training subjects",
            config.batch_size, n
        )));
    }
    let targets: Vec<&Matrix> = data
        .subjects
        .iter()
        .map(|s| {
            s.target
                .as_ref()
                .ok_or_else(|| Error::Schema(format!("subject {} has no target block", s.id)))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = if config.classifier_enabled {
        data.labels()?
    } else {
        vec![0; n]
    };
    let shared: Vec<&Matrix> = data.subjects.iter().map(|s| &s.shared).collect();
    model.standardizer = Standardizer::fit(&shared)?;
    let inputs: Vec<Matrix> = shared
        .iter()
        .map(|x| {
            model.check_input(x)?;
            Ok(model.standardizer.apply(x))
        })
        .collect::<Result<_>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut imp_sum, mut cls_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = chunk.len();
            let x = Matrix::vstack(&chunk.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?;
            let t = Matrix::vstack(&chunk.iter().map(|&i| targets[i]).collect::<Vec<_>>())?;
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();

            let mut sess = Session::new(&model.store, Mode::Train);
            let xv = sess.tape.constant(x);
            let tv = sess.tape.constant(t);
            let out = model.forward_vars(&mut sess, xv, b, None, config.classifier_enabled)?;
            let l_imp = imputation_loss(&mut sess.tape, out.imputed, tv, b)?;
            let (total, l_cls) = match out.prob {
                Some(prob) => {
                    let l_cls = classifier_loss(&mut sess.tape, prob, &y)?;
                    let weighted = sess.tape.scale(l_cls, config.lambda_cls);
                    (sess.tape.add(l_imp, weighted)?, Some(l_cls))
                }
                None => (l_imp, None),
            };
            let imp = sess.tape.scalar_value(l_imp);
            let cls = l_cls.map(|v| sess.tape.scalar_value(v));
            let tot = sess.tape.scalar_value(total);
            if !tot.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let grads = sess.tape.backward(total)?;
            let param_grads = sess.param_grads(&grads);
            let updates = sess.take_buffer_updates();
            drop(sess);
            adam.step(&mut model.store, &param_grads)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {}: {e}", bi + 1)))?;
            model.store.apply_buffer_updates(updates);

            log.batches.push(BatchLog {
                epoch,
                batch: bi + 1,
                size: b,
                imputation: imp,
                classification: cls,
                total: tot,
            });
            imp_sum += imp * b as f64;
            cls_sum += cls.unwrap_or(0.0) * b as f64;
            total_sum += tot * b as f64;
        }
        log.epochs.push(EpochLog {
            epoch,
            imputation: imp_sum / n as f64,
            classification: config.classifier_enabled.then_some(cls_sum / n as f64),
            total: total_sum / n as f64,
        });
    }
    model.trained = config.epochs > 0;
    model.final_losses = log.epochs.last().cloned();
    Ok((model, log))
}
