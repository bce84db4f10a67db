//! Post-hoc importance for trained GIN models: a learned soft mask over the
//! undirected edges, and per-node scores combining incident mask mass with
//! input-gradient magnitude.
//!
//! The mask multiplies every neighbor contribution in every GIN aggregation
//! (encoder and decoder). Its logits are fitted by plain gradient descent
//! on `task loss + sparsity * sum(w) + entropy * mean(H(w))`, where the task
//! loss measures how far the masked model drifts from the unmasked one.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::math::{Matrix, Mode, Session, Tape, Var};
use crate::model::{classifier_loss, imputation_loss, Backbone, DagiModel};

/// Starting logits are `N(INIT_MEAN, INIT_SD)`, so weights start near 0.73.
const INIT_MEAN: f64 = 1.0;
const INIT_SD: f64 = 0.1;
/// Keeps `ln` finite when a weight saturates.
const LOG_FLOOR: f64 = 1e-12;
/// Edges at or above this weight are drawn highlighted in DOT output.
const HIGHLIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Imputation,
    Classification,
    Joint,
}

impl Task {
    fn uses_imputation(self) -> bool {
        matches!(self, Task::Imputation | Task::Joint)
    }

    fn uses_classifier(self) -> bool {
        matches!(self, Task::Classification | Task::Joint)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Imputation => "imputation",
            Task::Classification => "classification",
            Task::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imputation" => Ok(Task::Imputation),
            "classification" => Ok(Task::Classification),
            "joint" => Ok(Task::Joint),
            _ => Err(Error::Config(format!(
                "unknown explanation task '{s}' (expected imputation, classification or joint)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ExplainConfig {
    pub task: Task,
    pub iterations: usize,
    pub sparsity_weight: f64,
    pub entropy_weight: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            task: Task::Imputation,
            iterations: 200,
            sparsity_weight: 0.005,
            entropy_weight: 0.1,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(
                "explanation needs at least one iteration".into(),
            ));
        }
        for (name, v) in [
            ("sparsity weight", self.sparsity_weight),
            ("entropy weight", self.entropy_weight),
            ("learning rate", self.learning_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeImportance {
    /// Endpoints ordered by ROI name.
    pub node_a: String,
    pub node_b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeImportance {
    pub node: String,
    /// `mask_mass + gradient`.
    pub score: f64,
    /// Sum of the final weights of incident edges.
    pub mask_mass: f64,
    /// Mean absolute gradient of the task output with respect to the
    /// node's (standardized) input features.
    pub gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub config: ExplainConfig,
    pub subjects: usize,
    /// Edges by decreasing weight.
    pub edges: Vec<EdgeImportance>,
    /// Nodes by decreasing score.
    pub nodes: Vec<NodeImportance>,
    /// Final mask weights in graph edge order.
    pub weights: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
}

fn name_order(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl ImportanceReport {
    pub fn edges_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["node_a", "node_b", "weight"])?;
        for e in &self.edges {
            w.write_record([e.node_a.as_str(), e.node_b.as_str(), &e.weight.to_string()])?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }

    pub fn nodes_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["node", "score", "mask_mass", "gradient"])?;
        for n in &self.nodes {
            w.write_record([
                n.node.as_str(),
                &n.score.to_string(),
                &n.mask_mass.to_string(),
                &n.gradient.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }

    /// Undirected DOT graph; node size follows the score and edges at or
    /// above weight 0.5 are drawn red.
    pub fn to_dot(&self) -> String {
        let max_score = self
            .nodes
            .iter()
            .map(|n| n.score)
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut out = String::from("graph importance {\n  node [shape=circle, fixedsize=true];\n");
        let mut nodes = self.nodes.clone();
        nodes.sort_by(|a, b| a.node.cmp(&b.node));
        for n in &nodes {
            let size = 0.3 + 0.9 * n.score / max_score;
            let _ = writeln!(
                out,
                "  \"{}\" [width={size:.3}, tooltip=\"score {:.6}\"];",
                n.node, n.score
            );
        }
        for e in &self.edges {
            let (color, pen) = if e.weight >= HIGHLIGHT {
                ("red", 1.0 + 3.0 * e.weight)
            } else {
                ("gray", 0.5 + e.weight)
            };
            let _ = writeln!(
                out,
                "  \"{}\" -- \"{}\" [color={color}, penwidth={pen:.3}, label=\"{:.3}\"];",
                e.node_a, e.node_b, e.weight
            );
        }
        out.push_str("}\n");
        out
    }

    /// Writes `edge_importance.csv`, `node_importance.csv` and
    /// `importance.dot` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("edge_importance.csv"), &self.edges_csv()?)?;
        write_atomic(&dir.join("node_importance.csv"), &self.nodes_csv()?)?;
        write_atomic(&dir.join("importance.dot"), self.to_dot().as_bytes())
    }
}

/// Fixed references the masked model is compared against.
struct Targets {
    imputed: Option<Var>,
    labels: Vec<u8>,
}

struct Problem<'m> {
    model: &'m DagiModel,
    inputs: Matrix,
    batch: usize,
    task: Task,
    unmasked_imputed: Matrix,
    predicted_labels: Vec<u8>,
}

impl<'m> Problem<'m> {
    fn new(model: &'m DagiModel, data: &Dataset, task: Task) -> Result<Self> {
        let xs: Vec<&Matrix> = data.subjects.iter().map(|s| &s.shared).collect();
        let inputs = model.prepare_inputs(&xs)?;
        let batch = xs.len();
        let mut sess = Session::frozen(model.store(), Mode::Eval);
        let x = sess.tape.constant(inputs.clone());
        let out = model.forward_vars(&mut sess, x, batch, None, task.uses_classifier())?;
        let unmasked_imputed = sess.tape.value(out.imputed).clone();
        let predicted_labels = match out.prob {
            Some(p) => sess
                .tape
                .value(p)
                .as_slice()
                .iter()
                .map(|&p| u8::from(p >= 0.5))
                .collect(),
            None => Vec::new(),
        };
        Ok(Self {
            model,
            inputs,
            batch,
            task,
            unmasked_imputed,
            predicted_labels,
        })
    }

    fn targets(&self, tape: &mut Tape) -> Targets {
        Targets {
            imputed: self
                .task
                .uses_imputation()
                .then(|| tape.constant(self.unmasked_imputed.clone())),
            labels: self.predicted_labels.clone(),
        }
    }

    /// Task loss of the masked model: squared drift of the imputations
    /// from the unmasked ones and/or cross-entropy against the unmasked
    /// model's predicted labels.
    fn task_loss(&self, sess: &mut Session<'_>, x: Var, weights: Var) -> Result<Var> {
        let out = self.model.forward_vars(
            sess,
            x,
            self.batch,
            Some(weights),
            self.task.uses_classifier(),
        )?;
        let t = self.targets(&mut sess.tape);
        let mut loss = None;
        if let Some(truth) = t.imputed {
            loss = Some(imputation_loss(
                &mut sess.tape,
                out.imputed,
                truth,
                self.batch,
            )?);
        }
        if let Some(prob) = out.prob {
            let l = classifier_loss(&mut sess.tape, prob, &t.labels)?;
            loss = Some(match loss {
                Some(prev) => sess.tape.add(prev, l)?,
                None => l,
            });
        }
        loss.ok_or_else(|| Error::Contract("explanation task produced no loss".into()))
    }

    /// Objective and its gradient with respect to the mask logits.
    fn objective(&self, logits: &Matrix, cfg: &ExplainConfig) -> Result<(f64, Matrix)> {
        let mut sess = Session::frozen(self.model.store(), Mode::Eval);
        let l = sess.tape.variable(logits.clone());
        let w = sess.tape.sigmoid(l);
        let x = sess.tape.constant(self.inputs.clone());
        let task = self.task_loss(&mut sess, x, w)?;
        let tape = &mut sess.tape;

        let mass = tape.sum(w)?;
        let sparsity = tape.scale(mass, cfg.sparsity_weight);

        // H(w) = -w ln w - (1 - w) ln(1 - w), averaged over edges.
        let w_floor = tape.offset(w, LOG_FLOOR);
        let ln_w = tape.log(w_floor);
        let a = tape.mul(w, ln_w)?;
        let neg_w = tape.scale(w, -1.0);
        let one_minus = tape.offset(neg_w, 1.0);
        let one_minus_floor = tape.offset(one_minus, LOG_FLOOR);
        let ln_1mw = tape.log(one_minus_floor);
        let b = tape.mul(one_minus, ln_1mw)?;
        let ab = tape.add(a, b)?;
        let mean_ab = tape.mean_all(ab)?;
        let entropy = tape.scale(mean_ab, -cfg.entropy_weight);

        let total = tape.add(task, sparsity)?;
        let total = tape.add(total, entropy)?;
        let value = tape.scalar_value(total);
        let mut grads = tape.backward(total)?;
        let grad = grads
            .take(l)
            .unwrap_or_else(|| Matrix::zeros(logits.rows(), logits.cols()));
        Ok((value, grad))
    }

    /// Mean absolute gradient per node of the task output (sum of imputed
    /// values and/or the label probability) under the given mask.
    fn input_saliency(&self, weights: &Matrix) -> Result<Vec<f64>> {
        let mut sess = Session::frozen(self.model.store(), Mode::Eval);
        let x = sess.tape.variable(self.inputs.clone());
        let w = sess.tape.constant(weights.clone());
        let out = self.model.forward_vars(
            &mut sess,
            x,
            self.batch,
            Some(w),
            self.task.uses_classifier(),
        )?;
        let mut score = None;
        if self.task.uses_imputation() {
            score = Some(sess.tape.sum(out.imputed)?);
        }
        if let Some(p) = out.prob {
            let s = sess.tape.sum(p)?;
            score = Some(match score {
                Some(prev) => sess.tape.add(prev, s)?,
                None => s,
            });
        }
        let score =
            score.ok_or_else(|| Error::Contract("explanation task produced no output".into()))?;
        let mut grads = sess.tape.backward(score)?;
        let g = grads
            .take(x)
            .unwrap_or_else(|| Matrix::zeros(self.inputs.rows(), self.inputs.cols()));
        let v = self.model.graph().node_count();
        let per = (self.batch * g.cols()) as f64;
        let mut out = vec![0.0; v];
        for r in 0..g.rows() {
            out[r % v] += g.row(r).iter().map(|x| x.abs()).sum::<f64>() / per;
        }
        Ok(out)
    }
}

fn check_model(model: &DagiModel, data: &Dataset, task: Task) -> Result<()> {
    if !model.is_trained() {
        return Err(Error::Contract(
            "explanations require a trained model; this checkpoint is untrained".into(),
        ));
    }
    if model.config().backbone == Backbone::Gcn {
        return Err(Error::Contract(
            "edge masks apply to GIN models only".into(),
        ));
    }
    if task.uses_classifier() && !model.classifier_enabled() {
        return Err(Error::Contract(format!(
            "task '{task}' needs the demographic classifier, which this model was trained without"
        )));
    }
    model.check_schema(&data.schema)?;
    if data.is_empty() {
        return Err(Error::Empty("explain: no subjects"));
    }
    if model.graph().edges().is_empty() {
        return Err(Error::Contract(
            "the model's graph has no edges to explain".into(),
        ));
    }
    Ok(())
}

/// Fits one edge mask shared by all subjects in `data`.
pub fn explain(model: &DagiModel, data: &Dataset, cfg: &ExplainConfig) -> Result<ImportanceReport> {
    cfg.validate()?;
    check_model(model, data, cfg.task)?;
    let problem = Problem::new(model, data, cfg.task)?;
    let n_edges = model.graph().edges().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(INIT_MEAN, INIT_SD).expect("valid normal");
    let mut logits = Matrix::from_fn(1, n_edges, |_, _| init.sample(&mut rng));

    let mut initial_objective = f64::NAN;
    for it in 0..cfg.iterations {
        let (value, grad) = problem.objective(&logits, cfg)?;
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "explanation objective became non-finite at iteration {}",
                it + 1
            )));
        }
        if it == 0 {
            initial_objective = value;
        }
        logits.axpy(-cfg.learning_rate, &grad);
    }
    let (final_objective, _) = problem.objective(&logits, cfg)?;
    let weights = logits.map(crate::math::tape::sigmoid);
    let saliency = problem.input_saliency(&weights)?;
    Ok(build_report(
        model,
        cfg,
        data.len(),
        &weights,
        &saliency,
        initial_objective,
        final_objective,
    ))
}

fn build_report(
    model: &DagiModel,
    cfg: &ExplainConfig,
    subjects: usize,
    weights: &Matrix,
    saliency: &[f64],
    initial_objective: f64,
    final_objective: f64,
) -> ImportanceReport {
    let graph = model.graph();
    let names = graph.names();
    let mut mass = vec![0.0; names.len()];
    let mut edges: Vec<EdgeImportance> = graph
        .edges()
        .iter()
        .zip(weights.as_slice())
        .map(|(&(i, j), &w)| {
            mass[i] += w;
            mass[j] += w;
            let (a, b) = name_order(&names[i], &names[j]);
            EdgeImportance {
                node_a: a,
                node_b: b,
                weight: w,
            }
        })
        .collect();
    edges.sort_by(|x, y| {
        y.weight
            .partial_cmp(&x.weight)
            .unwrap_or(Ordering::Equal)
            .then_with(|| x.node_a.cmp(&y.node_a))
            .then_with(|| x.node_b.cmp(&y.node_b))
    });
    let mut nodes: Vec<NodeImportance> = names
        .iter()
        .enumerate()
        .map(|(i, n)| NodeImportance {
            node: n.clone(),
            score: mass[i] + saliency[i],
            mask_mass: mass[i],
            gradient: saliency[i],
        })
        .collect();
    nodes.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| x.node.cmp(&y.node))
    });
    ImportanceReport {
        config: cfg.clone(),
        subjects,
        edges,
        nodes,
        weights: weights.as_slice().to_vec(),
        initial_objective,
        final_objective,
    }
}

/// Task loss (without regularizers) of the model under fixed mask weights.
pub fn masked_task_loss(
    model: &DagiModel,
    data: &Dataset,
    task: Task,
    weights: &[f64],
) -> Result<f64> {
    check_model(model, data, task)?;
    let problem = Problem::new(model, data, task)?;
    let w = Matrix::from_vec(1, weights.len(), weights.to_vec())?;
    let mut sess = Session::frozen(model.store(), Mode::Eval);
    let x = sess.tape.constant(problem.inputs.clone());
    let w = sess.tape.constant(w);
    let loss = problem.task_loss(&mut sess, x, w)?;
    Ok(sess.tape.scalar_value(loss))
}

/// Eval-mode imputations for one raw shared block under fixed edge weights.
pub fn masked_impute(model: &DagiModel, x_shared: &Matrix, weights: &[f64]) -> Result<Matrix> {
    let inputs = model.prepare_inputs(&[x_shared])?;
    let w = Matrix::from_vec(1, weights.len(), weights.to_vec())?;
    let mut sess = Session::frozen(model.store(), Mode::Eval);
    let x = sess.tape.constant(inputs);
    let w = sess.tape.constant(w);
    let out = model.forward_vars(&mut sess, x, 1, Some(w), false)?;
    Ok(sess.tape.value(out.imputed).clone())
}

/// Per-(subject, ROI) encoder embeddings as CSV bytes:
/// `subject_id, roi, label, e0 .. e{r-1}`.
pub fn embeddings_csv(model: &DagiModel, data: &Dataset) -> Result<Vec<u8>> {
    if !model.is_trained() {
        return Err(Error::Contract(
            "embedding export requires a trained model".into(),
        ));
    }
    model.check_schema(&data.schema)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject_id".to_string(), "roi".into(), "label".into()];
    let width = crate::model::EMBED_DIM;
    header.extend((0..width).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    let names = model.graph().names();
    for s in &data.subjects {
        let emb = model.forward(&s.shared)?.embeddings;
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        for (i, roi) in names.iter().enumerate() {
            let mut row = vec![s.id.clone(), roi.clone(), label.clone()];
            row.extend(emb.row(i).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
}

pub fn export_embeddings(model: &DagiModel, data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &embeddings_csv(model, data)?)
}
