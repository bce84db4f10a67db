//! Benchmark protocols: k-fold cross-validated imputation of the target
//! block with paired t-tests against a reference method, and the
//! downstream label-classification comparison with McNemar's test.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_linear, fit_mlp_regressor, LinearModel, LinearScope, MlpConfig, MlpRegressor, LINEAR_KIND,
    MLP_KIND,
};
use std::path::Path;

use crate::dataio::{Dataset, DatasetSchema, Predictions};
use crate::error::{Error, Result};
use crate::graph::RoiGraph;
use crate::layers::Mlp;
use crate::math::{AdamConfig, AdamState, Matrix, Mode, ParamStore, Session};
use crate::metrics::{
    balanced_accuracy, error_triple_with, kfold, mcnemar, paired_t_test, wasserstein_1d, FoldPlan,
    MreKind, Scores, TestResult,
};
use crate::model::checkpoint::Container;
use crate::model::{
    classifier_loss, train, Backbone, DagiModel, Imputer, TrainConfig, CHECKPOINT_KIND,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dagi,
    Gi,
    Gcn,
    LinearDirect,
    LinearRoi,
    Mlp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::LinearDirect,
        Method::LinearRoi,
        Method::Mlp,
        Method::Gcn,
        Method::Gi,
        Method::Dagi,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Dagi => "dagi",
            Method::Gi => "gi",
            Method::Gcn => "gcn",
            Method::LinearDirect => "linear-direct",
            Method::LinearRoi => "linear-roi",
            Method::Mlp => "mlp",
        }
    }

    pub fn is_graph_model(self) -> bool {
        matches!(self, Method::Dagi | Method::Gi | Method::Gcn)
    }

    /// Training configuration for a graph method, derived from `base`.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Method::Dagi => {
                cfg.classifier_enabled = true;
                cfg.backbone = Backbone::Gin;
            }
            Method::Gi => {
                cfg.classifier_enabled = false;
                cfg.backbone = Backbone::Gin;
            }
            Method::Gcn => {
                cfg.classifier_enabled = false;
                cfg.backbone = Backbone::Gcn;
            }
            _ => {}
        }
        cfg
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    Method::ALL.map(Method::tag).join(", ")
                ))
            })
    }
}

/// Fits `method` on `data`. Graph methods take their seed from `base`.
pub fn fit_method(
    method: Method,
    data: &Dataset,
    graph: &RoiGraph,
    base: &TrainConfig,
    mlp: &MlpConfig,
) -> Result<Box<dyn Imputer>> {
    Ok(match method {
        Method::Dagi | Method::Gi | Method::Gcn => {
            Box::new(train(data, graph, &method.train_config(base))?.0)
        }
        Method::LinearDirect => Box::new(fit_linear(data, LinearScope::Direct)?),
        Method::LinearRoi => Box::new(fit_linear(data, LinearScope::PerRoi)?),
        Method::Mlp => Box::new(fit_mlp_regressor(
            data,
            &MlpConfig {
                seed: base.seed,
                ..mlp.clone()
            },
        )?),
    })
}

/// A checkpoint of any trainable method.
pub enum LoadedModel {
    Graph(DagiModel),
    Linear(LinearModel),
    Mlp(MlpRegressor),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        match c.kind.as_str() {
            CHECKPOINT_KIND => Ok(Self::Graph(DagiModel::from_container(&c)?)),
            LINEAR_KIND => Ok(Self::Linear(LinearModel::from_container(&c)?)),
            MLP_KIND => Ok(Self::Mlp(MlpRegressor::from_container(&c)?)),
            other => Err(Error::Checkpoint(format!(
                "unknown checkpoint kind {other:?}"
            ))),
        }
    }

    pub fn schema(&self) -> &DatasetSchema {
        match self {
            Self::Graph(m) => m.schema(),
            Self::Linear(m) => &m.schema,
            Self::Mlp(m) => &m.schema,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Self::Graph(m) => match (m.config().backbone, m.classifier_enabled()) {
                (Backbone::Gcn, _) => Method::Gcn,
                (Backbone::Gin, true) => Method::Dagi,
                (Backbone::Gin, false) => Method::Gi,
            },
            Self::Linear(m) => match m.scope {
                LinearScope::Direct => Method::LinearDirect,
                LinearScope::PerRoi => Method::LinearRoi,
            },
            Self::Mlp(_) => Method::Mlp,
        }
    }

    pub fn imputer(&self) -> &dyn Imputer {
        match self {
            Self::Graph(m) => m,
            Self::Linear(m) => m,
            Self::Mlp(m) => m,
        }
    }

    pub fn graph_model(self, what: &str) -> Result<DagiModel> {
        match self {
            Self::Graph(m) => Ok(m),
            _ => Err(Error::Contract(format!(
                "{what} needs a graph model checkpoint"
            ))),
        }
    }

    /// Refuses data whose ROI or shared-measurement layout differs.
    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<()> {
        let own = self.schema();
        if own.shared_fingerprint() == schema.shared_fingerprint() {
            return Ok(());
        }
        let cols = |s: &DatasetSchema| s.value_columns(&s.shared);
        let (want, got) = (cols(own), cols(schema));
        let missing: Vec<&String> = want.iter().filter(|c| !got.contains(c)).collect();
        let extra: Vec<&String> = got.iter().filter(|c| !want.contains(c)).collect();
        Err(Error::Schema(format!(
            "data does not match the checkpoint: missing columns {missing:?}, unexpected columns {extra:?}{}",
            if missing.is_empty() && extra.is_empty() {
                " (same columns, different order)"
            } else {
                ""
            }
        )))
    }

    pub fn impute(&self, data: &Dataset) -> Result<Predictions> {
        self.check_schema(&data.schema)?;
        if let Self::Graph(m) = self {
            return m.impute(data);
        }
        let values = data
            .subjects
            .iter()
            .map(|s| self.imputer().predict(&s.shared))
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictions {
            tag: None,
            measurements: self.schema().target.clone(),
            ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
            values,
            label_prob: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Method every other one is tested against.
    pub reference: Method,
    pub train: TrainConfig,
    pub mlp: MlpConfig,
    pub mre: MreKind,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            methods: Method::ALL.to_vec(),
            reference: Method::Dagi,
            train: TrainConfig::default(),
            mlp: MlpConfig::default(),
            mre: MreKind::Aggregate,
        }
    }
}

/// Scores of one method on one fold's test subjects for one measurement
/// (`measurement = "all"` pools every target column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub method: Method,
    pub fold: usize,
    pub measurement: String,
    pub mse: f64,
    pub mae: f64,
    pub mre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub method: Method,
    pub measurement: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRecord {
    pub measurement: String,
    pub metric: String,
    pub method: Method,
    pub reference: Method,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: CvConfig,
    pub plan: FoldPlan,
    pub measurements: Vec<String>,
    pub records: Vec<FoldRecord>,
    /// Errors pooled over all out-of-fold predictions.
    pub summary: Vec<SummaryRecord>,
    pub tests: Vec<TTestRecord>,
    /// Out-of-fold predictions per method, indexed like the input subjects.
    #[serde(skip)]
    pub predictions: Vec<(Method, Vec<Matrix>)>,
}

fn truths(data: &Dataset) -> Result<Vec<Matrix>> {
    data.subjects
        .iter()
        .map(|s| {
            s.target
                .clone()
                .ok_or_else(|| Error::Schema(format!("subject {} has no target block", s.id)))
        })
        .collect()
}

fn column(blocks: &[Matrix], col: Option<usize>) -> Vec<Matrix> {
    match col {
        None => blocks.to_vec(),
        Some(c) => blocks
            .iter()
            .map(|b| Matrix::from_fn(b.rows(), 1, |r, _| b.get(r, c)))
            .collect(),
    }
}

/// Seed used for the model trained on fold `fold`; shared by all methods
/// so paired methods start from the same initialization.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(fold as u64)
}

/// k-fold cross-validation of each method's imputation error, with
/// per-subject paired t-tests of every method against the reference.
pub fn impute_cv(data: &Dataset, graph: &RoiGraph, cfg: &CvConfig) -> Result<CvReport> {
    if cfg.methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    let truth = truths(data)?;
    let plan = kfold(data.len(), cfg.folds, cfg.seed, None)?;
    let measurements = data.schema.target.clone();

    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.folds).map(move |f| (m, f)))
        .collect();
    let outputs: Vec<Result<(Method, usize, Vec<(usize, Matrix)>)>> = jobs
        .par_iter()
        .map(|&(method, fold)| {
            let train_set = data.select(&plan.train_indices(fold));
            let base = TrainConfig {
                seed: fold_seed(cfg.seed, fold),
                ..cfg.train.clone()
            };
            let model = fit_method(method, &train_set, graph, &base, &cfg.mlp)?;
            let preds = plan
                .test_indices(fold)
                .into_iter()
                .map(|i| Ok((i, model.predict(&data.subjects[i].shared)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((method, fold, preds))
        })
        .collect();

    let mut predictions: Vec<(Method, Vec<Matrix>)> = Vec::new();
    let mut records = Vec::new();
    for out in outputs {
        let (method, fold, preds) = out?;
        let idx: Vec<usize> = preds.iter().map(|(i, _)| *i).collect();
        let p: Vec<Matrix> = preds.iter().map(|(_, m)| m.clone()).collect();
        let t: Vec<Matrix> = idx.iter().map(|&i| truth[i].clone()).collect();
        let scores = error_triple_with(&p, &t, cfg.mre)?;
        let rows = std::iter::once(("all".to_string(), scores.overall)).chain(
            measurements
                .iter()
                .cloned()
                .zip(scores.per_measurement.iter().copied()),
        );
        for (measurement, s) in rows {
            records.push(FoldRecord {
                method,
                fold,
                measurement,
                mse: s.mse,
                mae: s.mae,
                mre: s.mre,
            });
        }
        let slot = match predictions.iter().position(|(m, _)| *m == method) {
            Some(k) => k,
            None => {
                predictions.push((method, vec![Matrix::zeros(0, 0); data.len()]));
                predictions.len() - 1
            }
        };
        for (i, m) in preds {
            predictions[slot].1[i] = m;
        }
    }

    let mut summary = Vec::new();
    for (method, preds) in &predictions {
        let s = error_triple_with(preds, &truth, cfg.mre)?;
        summary.push(SummaryRecord {
            method: *method,
            measurement: "all".into(),
            scores: s.overall,
        });
        for (name, sc) in measurements.iter().zip(&s.per_measurement) {
            summary.push(SummaryRecord {
                method: *method,
                measurement: name.clone(),
                scores: *sc,
            });
        }
    }

    let mut tests = Vec::new();
    if let Some((_, reference)) = predictions.iter().find(|(m, _)| *m == cfg.reference) {
        let cols: Vec<(String, Option<usize>)> = std::iter::once(("all".to_string(), None))
            .chain(
                measurements
                    .iter()
                    .cloned()
                    .enumerate()
                    .map(|(i, m)| (m, Some(i))),
            )
            .collect();
        for (method, preds) in predictions.iter().filter(|(m, _)| *m != cfg.reference) {
            for (name, col) in &cols {
                let per_subject = |blocks: &[Matrix]| -> Result<[Vec<f64>; 3]> {
                    let p = column(blocks, *col);
                    let t = column(&truth, *col);
                    let mut out = [Vec::new(), Vec::new(), Vec::new()];
                    for (pi, ti) in p.iter().zip(&t) {
                        let s = error_triple_with(
                            std::slice::from_ref(pi),
                            std::slice::from_ref(ti),
                            cfg.mre,
                        )?
                        .overall;
                        out[0].push(s.mse);
                        out[1].push(s.mae);
                        out[2].push(s.mre);
                    }
                    Ok(out)
                };
                let a = per_subject(preds)?;
                let b = per_subject(reference)?;
                for (k, metric) in ["mse", "mae", "mre"].into_iter().enumerate() {
                    if let Ok(result) = paired_t_test(&a[k], &b[k]) {
                        tests.push(TTestRecord {
                            measurement: name.clone(),
                            metric: metric.into(),
                            method: *method,
                            reference: cfg.reference,
                            result,
                        });
                    }
                }
            }
        }
    }

    Ok(CvReport {
        config: cfg.clone(),
        plan,
        measurements,
        records,
        summary,
        tests,
        predictions,
    })
}

impl CvReport {
    pub fn summary_for(&self, method: Method, measurement: &str) -> Option<Scores> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.measurement == measurement)
            .map(|r| r.scores)
    }

    pub fn predictions_for(&self, method: Method) -> Option<&[Matrix]> {
        self.predictions
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, p)| p.as_slice())
    }

    /// One row per method x fold x measurement.
    pub fn records_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "fold", "measurement", "mse", "mae", "mre"])?;
        for r in &self.records {
            w.write_record([
                r.method.tag().to_string(),
                (r.fold + 1).to_string(),
                r.measurement.clone(),
                r.mse.to_string(),
                r.mae.to_string(),
                r.mre.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }

    pub fn tests_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["measurement", "metric", "method", "reference", "t", "p"])?;
        for t in &self.tests {
            w.write_record([
                t.measurement.clone(),
                t.metric.clone(),
                t.method.tag().to_string(),
                t.reference.tag().to_string(),
                t.result.statistic.to_string(),
                t.result.p_value.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }

    /// Methods as rows, MSE/MAE/MRE per target measurement as columns.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# errors pooled over all entries of all out-of-fold predictions; {}-fold CV, seed {}; MRE {}",
            self.config.folds,
            self.config.seed,
            match self.config.mre {
                MreKind::Aggregate => "= 100 * sum|err| / sum|truth|",
                MreKind::PerEntry => "= 100 * mean(|err| / |truth|)",
            }
        );
        let _ = write!(out, "{:<14}", "method");
        for m in &self.measurements {
            let _ = write!(out, " | {:^36}", m);
        }
        out.push('\n');
        let _ = write!(out, "{:<14}", "");
        for _ in &self.measurements {
            let _ = write!(out, " | {:>11} {:>11} {:>12}", "MSE", "MAE", "MRE");
        }
        out.push('\n');
        for &method in &self.config.methods {
            let _ = write!(out, "{:<14}", method.tag());
            for m in &self.measurements {
                match self.summary_for(method, m) {
                    Some(s) => {
                        let _ = write!(out, " | {:>11.5} {:>11.5} {:>12.3}", s.mse, s.mae, s.mre);
                    }
                    None => {
                        let _ = write!(out, " | {:>36}", "-");
                    }
                }
            }
            out.push('\n');
        }
        if !self.tests.is_empty() {
            let _ = writeln!(
                out,
                "\npaired two-sided t-tests of per-subject errors against {}:",
                self.config.reference
            );
            for t in &self.tests {
                let _ = writeln!(
                    out,
                    "{:<14} {:<20} {:<4} t = {:>9.4} p = {:.3e}",
                    t.method.tag(),
                    t.measurement,
                    t.metric,
                    t.result.statistic,
                    t.result.p_value
                );
            }
        }
        out
    }
}

/// Wasserstein distance between the label groups of each predicted entry:
/// a `v x q` matrix over ROIs and measurements.
pub fn group_distances(blocks: &[Matrix], labels: &[u8]) -> Result<Matrix> {
    if blocks.len() != labels.len() {
        return Err(Error::Contract(
            "one label per prediction block required".into(),
        ));
    }
    let first = blocks.first().ok_or(Error::Empty("group_distances"))?;
    let (v, q) = first.shape();
    let mut out = Matrix::zeros(v, q);
    for r in 0..v {
        for c in 0..q {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (blk, &l) in blocks.iter().zip(labels) {
                if l == 0 {
                    a.push(blk.get(r, c));
                } else {
                    b.push(blk.get(r, c));
                }
            }
            out.set(r, c, wasserstein_1d(&a, &b)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            learning_rate: 0.01,
            epochs: 300,
            batch_size: 32,
        }
    }
}

/// MLP label classifier on column-standardized feature rows.
pub struct MlpClassifier {
    store: ParamStore,
    mlp: Mlp,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl MlpClassifier {
    pub fn fit(x: &Matrix, y: &[u8], cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || y.len() != n {
            return Err(Error::Contract("classifier needs one label per row".into()));
        }
        let mut mean = vec![0.0; d];
        let mut sd = vec![1.0; d];
        for c in 0..d {
            let m = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
            let s = ((0..n).map(|r| (x.get(r, c) - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            mean[c] = m;
            sd[c] = if s > 1e-12 { s } else { 1.0 };
        }
        let mut widths = vec![d];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "clf", &widths);
        let mut model = Self {
            store,
            mlp,
            mean,
            sd,
        };
        let xs = model.standardize(x);
        rng.set_stream(1);
        let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate));
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let xb = Matrix::from_fn(chunk.len(), d, |r, c| xs.get(chunk[r], c));
                let yb: Vec<u8> = chunk.iter().map(|&i| y[i]).collect();
                let mut sess = Session::new(&model.store, Mode::Train);
                let xv = sess.tape.constant(xb);
                let logit = model.mlp.forward(&mut sess, xv)?;
                let prob = sess.tape.sigmoid(logit);
                let loss = classifier_loss(&mut sess.tape, prob, &yb)?;
                let grads = sess.tape.backward(loss)?;
                let pg = sess.param_grads(&grads);
                drop(sess);
                adam.step(&mut model.store, &pg)?;
            }
        }
        Ok(model)
    }

    fn standardize(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            (x.get(r, c) - self.mean[c]) / self.sd[c]
        })
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut sess = Session::frozen(&self.store, Mode::Eval);
        let xv = sess.tape.constant(self.standardize(x));
        let logit = self.mlp.forward(&mut sess, xv)?;
        let prob = sess.tape.sigmoid(logit);
        Ok(sess.tape.value(prob).as_slice().to_vec())
    }
}

/// A feature set: the shared columns plus zero or more merged imputed
/// blocks, selected by method tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub imputed_tags: Vec<String>,
}

impl Variant {
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            imputed_tags: Vec::new(),
        }
    }

    pub fn with(tag: &str) -> Self {
        Self {
            name: format!("base+{tag}"),
            imputed_tags: vec![tag.into()],
        }
    }

    pub fn features(&self, data: &Dataset) -> Result<Matrix> {
        let blocks: Vec<&crate::dataio::ImputedColumns> = self
            .imputed_tags
            .iter()
            .map(|t| {
                data.imputed.iter().find(|b| &b.tag == t).ok_or_else(|| {
                    Error::Schema(format!("no imputed columns tagged {t:?} were merged"))
                })
            })
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = data
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut row = s.shared.as_slice().to_vec();
                for b in &blocks {
                    row.extend_from_slice(b.values[i].as_slice());
                }
                row
            })
            .collect();
        let d = rows.first().map_or(0, Vec::len);
        Matrix::from_vec(rows.len(), d, rows.concat())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub folds: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Over all out-of-fold predictions.
    pub balanced_accuracy: f64,
    pub fold_accuracy: Vec<f64>,
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarRecord {
    pub a: String,
    pub b: String,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub config: DownstreamConfig,
    pub variants: Vec<VariantResult>,
    /// Every variant against the first one.
    pub tests: Vec<McNemarRecord>,
}

/// Stratified k-fold classification of the label from each variant's
/// features. Every variant uses the same folds and classifier seeds.
pub fn downstream(
    data: &Dataset,
    variants: &[Variant],
    cfg: &DownstreamConfig,
) -> Result<DownstreamReport> {
    if variants.is_empty() {
        return Err(Error::Config("no feature variants to compare".into()));
    }
    let labels = data.labels()?;
    let plan = kfold(data.len(), cfg.folds, cfg.seed, Some(&labels))?;
    let mut results = Vec::new();
    for variant in variants {
        let x = variant.features(data)?;
        let mut pred = vec![0u8; data.len()];
        let mut fold_accuracy = Vec::new();
        for fold in 0..cfg.folds {
            let tr = plan.train_indices(fold);
            let te = plan.test_indices(fold);
            let xt = Matrix::from_fn(tr.len(), x.cols(), |r, c| x.get(tr[r], c));
            let yt: Vec<u8> = tr.iter().map(|&i| labels[i]).collect();
            let clf = MlpClassifier::fit(&xt, &yt, &cfg.classifier, fold_seed(cfg.seed, fold))?;
            let xe = Matrix::from_fn(te.len(), x.cols(), |r, c| x.get(te[r], c));
            let probs = clf.predict_proba(&xe)?;
            let fold_pred: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
            let fold_truth: Vec<u8> = te.iter().map(|&i| labels[i]).collect();
            fold_accuracy.push(balanced_accuracy(&fold_pred, &fold_truth).unwrap_or(f64::NAN));
            for (&i, &p) in te.iter().zip(&fold_pred) {
                pred[i] = p;
            }
        }
        results.push(VariantResult {
            variant: variant.clone(),
            balanced_accuracy: balanced_accuracy(&pred, &labels)?,
            fold_accuracy,
            correct: pred.iter().zip(&labels).map(|(p, l)| p == l).collect(),
        });
    }
    let tests = results
        .iter()
        .skip(1)
        .map(|r| {
            Ok(McNemarRecord {
                a: results[0].variant.name.clone(),
                b: r.variant.name.clone(),
                result: mcnemar(&results[0].correct, &r.correct)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DownstreamReport {
        config: cfg.clone(),
        variants: results,
        tests,
    })
}

impl DownstreamReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {}-fold stratified CV, MLP hidden {:?}, lr {}, {} epochs, seed {}",
            self.config.folds,
            self.config.classifier.hidden,
            self.config.classifier.learning_rate,
            self.config.classifier.epochs,
            self.config.seed
        );
        let _ = writeln!(out, "{:<30} {:>18}", "features", "balanced accuracy");
        for v in &self.variants {
            let _ = writeln!(out, "{:<30} {:>18.4}", v.variant.name, v.balanced_accuracy);
        }
        for t in &self.tests {
            let _ = writeln!(
                out,
                "McNemar {} vs {}: statistic {:.4}, p = {:.4e} ({})",
                t.a,
                t.b,
                t.result.statistic,
                t.result.p_value,
                t.result.note.clone().unwrap_or_default()
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "fold", "balanced_accuracy"])?;
        for v in &self.variants {
            for (f, a) in v.fold_accuracy.iter().enumerate() {
                w.write_record([v.variant.name.clone(), (f + 1).to_string(), a.to_string()])?;
            }
            w.write_record([
                v.variant.name.clone(),
                "all".into(),
                v.balanced_accuracy.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }
}
