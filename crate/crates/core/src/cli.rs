//! Command-line front end. Every command resolves its settings from flags,
//! then an optional TOML file (`--config`), then built-in defaults, and
//! writes the resolved settings to `run_config.toml` in its output
//! directory. Exit codes: 0 success, 1 runtime failure, 2 usage or input
//! error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::MlpConfig;
use crate::datagen::{describe, generate, SynthConfig};
use crate::dataio::{
    load_csv, load_predictions, merge_predictions, normalize_confound, write_atomic, Dataset,
    DatasetSchema, Predictions,
};
use crate::error::{Error, Result};
use crate::eval::{
    downstream, impute_cv, CvConfig, DownstreamConfig, LoadedModel, Method, Variant,
};
use crate::explain::{explain, export_embeddings, ExplainConfig, Task};
use crate::graph::RoiGraph;
use crate::metrics::{error_triple, Scores};
use crate::model::{train, TrainConfig};

/// Default output root when `--out` is absent.
pub const OUT_ENV: &str = "DAGI_OUT";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "dagi",
    version,
    about = "Graph-based imputation of missing ROI measurements"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic source/target cohort pair.
    GenSynth(GenSynthArgs),
    /// Train one imputation method and save its checkpoint.
    Train(TrainArgs),
    /// Impute target measurements with a saved checkpoint.
    Impute(ImputeArgs),
    /// Cross-validated benchmark, downstream classification, or scoring.
    Evaluate(EvaluateArgs),
    /// Edge and node importance of a trained GIN model.
    Explain(ExplainArgs),
    /// Per-ROI encoder embeddings of a trained graph model.
    ExportEmbeddings(EmbeddingArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::Train(_) => "train",
            Command::Impute(_) => "impute",
            Command::Evaluate(_) => "evaluate",
            Command::Explain(_) => "explain",
            Command::ExportEmbeddings(_) => "export-embeddings",
        }
    }

    fn flags(&self) -> Value {
        let v = match self {
            Command::GenSynth(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::Impute(a) => serde_json::to_value(a),
            Command::Evaluate(a) => serde_json::to_value(a),
            Command::Explain(a) => serde_json::to_value(a),
            Command::ExportEmbeddings(a) => serde_json::to_value(a),
        };
        v.expect("flag structs serialize")
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Common {
    /// Output directory [default: $DAGI_OUT/<command>, else ./dagi-out/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with defaults for any flag of this command.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenSynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Edge file; node names are taken in order of first appearance.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    #[arg(long)]
    pub sex_effect: Option<f64>,
    #[arg(long)]
    pub coupling: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub affected_fraction: Option<f64>,
    #[arg(long)]
    pub size_sex_shift: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset schema (JSON).
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Edge file [default: built-in 34-region graph].
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// dagi, gi, gcn, linear-direct, linear-roi or mlp.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ImputeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Column tag [default: the checkpoint's method].
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// impute-cv, downstream or score.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Comma-separated methods for impute-cv.
    #[arg(long)]
    pub method: Option<String>,
    /// Method the others are tested against [default: dagi].
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    /// Prediction CSVs as `TAG=PATH` or `PATH`; repeatable.
    #[arg(long)]
    pub extra_imputed: Vec<String>,
    /// Confound for downstream normalization [default: the schema's first].
    #[arg(long)]
    pub confound: Option<String>,
    /// Comma-separated shared measurements divided by the confound
    /// [default: area,volume where present].
    #[arg(long)]
    pub normalize: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExplainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// imputation, classification or joint.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Explain only the first N subjects.
    #[arg(long)]
    pub max_subjects: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EmbeddingArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// Resolved settings of one run; also the `--config` file format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_imputed: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confound: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_subjects: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_source: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sex_effect: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub affected_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_sex_shift: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
        value
            .clone()
            .ok_or_else(|| Error::Config(format!("missing required setting --{flag}")))
    }
}

/// Flags win over the file; only keys the command accepts are taken from
/// the file. Empty repeatable flags count as absent.
fn resolve(command: &Command, file: Option<RunConfig>) -> Result<RunConfig> {
    let flags = command.flags();
    let file = serde_json::to_value(file.unwrap_or_default()).expect("run config serializes");
    let mut merged = serde_json::Map::new();
    let Value::Object(flag_map) = flags else {
        unreachable!("flag structs are objects")
    };
    for (key, value) in flag_map {
        let absent = value.is_null() || value.as_array().is_some_and(Vec::is_empty);
        let chosen = if absent {
            file.get(&key).cloned().unwrap_or(Value::Null)
        } else {
            value
        };
        if !chosen.is_null() {
            merged.insert(key, chosen);
        }
    }
    merged.insert("command".into(), Value::String(command.name().into()));
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::Config(format!("invalid settings: {e}")))
}

fn common(command: &Command) -> &Common {
    match command {
        Command::GenSynth(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Impute(a) => &a.common,
        Command::Evaluate(a) => &a.common,
        Command::Explain(a) => &a.common,
        Command::ExportEmbeddings(a) => &a.common,
    }
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cfg.out {
        return out.clone();
    }
    let command = cfg.command.clone().unwrap_or_default();
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("dagi-out").join(command),
    }
}

/// Creates the output directory and echoes the run configuration into it.
fn prepare_output(cfg: &mut RunConfig) -> Result<PathBuf> {
    let dir = output_dir(cfg);
    cfg.out = Some(dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&dir.join(RUN_CONFIG_FILE), cfg.to_toml().as_bytes())?;
    Ok(dir)
}

/// Exit code for an error: input and usage problems give 2, failures
/// while running give 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Schema(_)
        | Error::Format { .. }
        | Error::Contract(_)
        | Error::Empty(_)
        | Error::Checkpoint(_)
        | Error::CheckpointVersion { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    let file = common(command)
        .config
        .as_deref()
        .map(RunConfig::load)
        .transpose()?;
    let mut cfg = resolve(command, file)?;
    match command {
        Command::GenSynth(_) => cmd_gen_synth(&mut cfg),
        Command::Train(_) => cmd_train(&mut cfg),
        Command::Impute(_) => cmd_impute(&mut cfg),
        Command::Evaluate(_) => cmd_evaluate(&mut cfg),
        Command::Explain(_) => cmd_explain(&mut cfg),
        Command::ExportEmbeddings(_) => cmd_export_embeddings(&mut cfg),
    }
}

/// Node names in order of first appearance in an edge file.
fn graph_with_inferred_names(path: &Path) -> Result<RoiGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        for name in line.split('\t').map(str::trim) {
            if !names.iter().any(|n| n == name) {
                names.push(name.to_string());
            }
        }
    }
    RoiGraph::parse(&text, names, path)
}

fn load_graph(cfg: &RunConfig, schema: &DatasetSchema) -> Result<RoiGraph> {
    match &cfg.graph {
        Some(path) => RoiGraph::load(path, schema.roi_names.clone()),
        None => {
            let g = RoiGraph::default_desikan_killiany();
            if g.names() != schema.roi_names {
                return Err(Error::Schema(
                    "the schema's ROIs differ from the built-in graph; pass --graph".into(),
                ));
            }
            Ok(g)
        }
    }
}

/// Loads a cohort CSV. Files without the schema's target columns (the
/// target cohort) are read against the schema minus its targets.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            line: 1,
            message: format!("{other:?}"),
        },
    })?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let target_cols = schema.value_columns(&schema.target);
    let has_targets = target_cols.iter().any(|c| header.contains(c));
    if has_targets || schema.target.is_empty() {
        load_csv(path, schema)
    } else {
        load_csv(path, &schema.without_target())
    }
}

fn load_data(cfg: &RunConfig) -> Result<(DatasetSchema, Dataset)> {
    let schema_path = RunConfig::required(&cfg.schema, "schema")?;
    let data_path = RunConfig::required(&cfg.data, "data")?;
    let schema = DatasetSchema::load(&schema_path)?;
    let data = load_dataset(&data_path, &schema)?;
    Ok((schema, data))
}

fn train_config(cfg: &mut RunConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        learning_rate: *cfg.lr.get_or_insert(d.learning_rate),
        batch_size: *cfg.batch_size.get_or_insert(d.batch_size),
        epochs: *cfg.epochs.get_or_insert(d.epochs),
        lambda_cls: *cfg.lambda_cls.get_or_insert(d.lambda_cls),
        seed: *cfg.seed.get_or_insert(d.seed),
        ..d
    }
}

fn cmd_gen_synth(cfg: &mut RunConfig) -> Result<()> {
    let d = SynthConfig::default();
    let graph = match &cfg.graph {
        Some(p) => graph_with_inferred_names(p)?,
        None => RoiGraph::default_desikan_killiany(),
    };
    let sc = SynthConfig {
        v: graph.node_count(),
        n_source: *cfg.n_source.get_or_insert(d.n_source),
        n_target: *cfg.n_target.get_or_insert(d.n_target),
        sex_effect: *cfg.sex_effect.get_or_insert(d.sex_effect),
        coupling: *cfg.coupling.get_or_insert(d.coupling),
        noise_sd: *cfg.noise_sd.get_or_insert(d.noise_sd),
        affected_fraction: *cfg.affected_fraction.get_or_insert(d.affected_fraction),
        size_sex_shift: *cfg.size_sex_shift.get_or_insert(d.size_sex_shift),
        seed: *cfg.seed.get_or_insert(d.seed),
        ..d
    };
    sc.validate()?;
    let syn = generate(&sc, &graph)?;
    let dir = prepare_output(cfg)?;
    syn.source.schema.save(&dir.join("schema.json"))?;
    graph.save(&dir.join("graph.tsv"))?;
    syn.source.save_csv(&dir.join("source.csv"))?;
    syn.target.save_csv(&dir.join("target.csv"))?;
    syn.target_with_truth()
        .save_csv(&dir.join("target_truth.csv"))?;
    let truth = serde_json::json!({
        "affected": syn.truth.affected,
        "affected_rois": graph
            .names()
            .iter()
            .zip(&syn.truth.affected)
            .filter(|(_, a)| **a)
            .map(|(n, _)| n.clone())
            .collect::<Vec<_>>(),
        "coefficients": syn.truth.coefficients,
        "config": sc,
    });
    let truth = serde_json::to_vec_pretty(&truth)?;
    write_atomic(&dir.join("ground_truth.json"), &truth)?;
    let summary = format!(
        "{}\n{}",
        describe("source", &syn.source).to_text(),
        describe("target", &syn.target).to_text()
    );
    write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig) -> Result<()> {
    let method: Method = cfg.method.get_or_insert_with(|| "dagi".into()).parse()?;
    let (schema, data) = load_data(cfg)?;
    let graph = load_graph(cfg, &schema)?;
    let base = train_config(cfg);
    match method {
        Method::Dagi | Method::Gi | Method::Gcn => {
            let tc = method.train_config(&base);
            let (model, log) = train(&data, &graph, &tc)?;
            let dir = prepare_output(cfg)?;
            model.save(&dir.join("model.ckpt"))?;
            write_atomic(&dir.join("train_log.csv"), &log.to_csv_bytes()?)?;
            if let Some(last) = log.epochs.last() {
                println!(
                    "{method}: {} epochs, final L_imp {:.6}{}",
                    last.epoch,
                    last.imputation,
                    last.classification
                        .map(|c| format!(", L_cls {c:.6}"))
                        .unwrap_or_default()
                );
            }
            println!("wrote {}", dir.display());
        }
        Method::LinearDirect | Method::LinearRoi => {
            let scope = if method == Method::LinearDirect {
                crate::baselines::LinearScope::Direct
            } else {
                crate::baselines::LinearScope::PerRoi
            };
            let model = crate::baselines::fit_linear(&data, scope)?;
            let dir = prepare_output(cfg)?;
            model.save(&dir.join("model.ckpt"))?;
            println!(
                "{method}: fitted{}",
                if model.ridge_used() {
                    " (ridge fallback used)"
                } else {
                    ""
                }
            );
            println!("wrote {}", dir.display());
        }
        Method::Mlp => {
            let mc = MlpConfig {
                epochs: base.epochs,
                learning_rate: base.learning_rate,
                batch_size: base.batch_size,
                seed: base.seed,
                ..MlpConfig::default()
            };
            let model = crate::baselines::fit_mlp_regressor(&data, &mc)?;
            let dir = prepare_output(cfg)?;
            model.save(&dir.join("model.ckpt"))?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn cmd_impute(cfg: &mut RunConfig) -> Result<()> {
    let model = LoadedModel::load(&RunConfig::required(&cfg.model, "model")?)?;
    let (_, data) = load_data(cfg)?;
    let mut preds = model.impute(&data)?;
    let tag = cfg
        .tag
        .get_or_insert_with(|| model.method().tag().into())
        .clone();
    preds.tag = Some(tag);
    let dir = prepare_output(cfg)?;
    let path = dir.join("predictions.csv");
    preds.save_csv(&path, &model.schema().roi_names)?;
    println!(
        "imputed {} subjects; wrote {}",
        preds.ids.len(),
        path.display()
    );
    Ok(())
}

fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for m in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = m.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// `TAG=PATH` or `PATH`.
fn load_extra(spec: &str, schema: &DatasetSchema) -> Result<(String, Predictions)> {
    let (tag, path) = match spec.split_once('=') {
        Some((t, p)) => (Some(t.to_string()), PathBuf::from(p)),
        None => (None, PathBuf::from(spec)),
    };
    let preds = load_predictions(&path, &schema.roi_names, &schema.target)?;
    let tag = tag
        .or_else(|| preds.tag.clone())
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .ok_or_else(|| Error::Config(format!("cannot name the predictions in {spec:?}")))?;
    Ok((tag, preds))
}

fn cmd_evaluate(cfg: &mut RunConfig) -> Result<()> {
    let mode = cfg.mode.get_or_insert_with(|| "impute-cv".into()).clone();
    match mode.as_str() {
        "impute-cv" => evaluate_cv(cfg),
        "downstream" => evaluate_downstream(cfg),
        "score" => evaluate_score(cfg),
        other => Err(Error::Config(format!(
            "unknown mode {other:?} (expected impute-cv, downstream or score)"
        ))),
    }
}

fn evaluate_cv(cfg: &mut RunConfig) -> Result<()> {
    let all = Method::ALL.map(Method::tag).join(",");
    let methods = parse_methods(cfg.method.get_or_insert(all))?;
    let reference: Method = cfg.reference.get_or_insert_with(|| "dagi".into()).parse()?;
    if methods.len() < 2 {
        return Err(Error::Config(
            "impute-cv compares methods with paired t-tests; give at least two".into(),
        ));
    }
    if !methods.contains(&reference) {
        return Err(Error::Config(format!(
            "reference method {reference} is not among the evaluated methods"
        )));
    }
    let folds = *cfg.folds.get_or_insert(5);
    let train = train_config(cfg);
    let (schema, data) = load_data(cfg)?;
    let graph = load_graph(cfg, &schema)?;
    let cv = CvConfig {
        folds,
        seed: train.seed,
        methods,
        reference,
        mlp: MlpConfig {
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            ..MlpConfig::default()
        },
        train,
        ..CvConfig::default()
    };
    let report = impute_cv(&data, &graph, &cv)?;
    let dir = prepare_output(cfg)?;
    write_atomic(&dir.join("cv_folds.csv"), &report.records_csv()?)?;
    write_atomic(&dir.join("cv_tests.csv"), &report.tests_csv()?)?;
    let table = report.table();
    write_atomic(&dir.join("cv_report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn evaluate_downstream(cfg: &mut RunConfig) -> Result<()> {
    let (schema, mut data) = load_data(cfg)?;
    let extras = cfg.extra_imputed.get_or_insert_with(Vec::new).clone();
    for spec in &extras {
        let (tag, preds) = load_extra(spec, &schema)?;
        data = merge_predictions(&data, &preds, &tag)?;
    }
    if !schema.confounds.is_empty() || cfg.confound.is_some() {
        let confound = cfg
            .confound
            .get_or_insert_with(|| schema.confounds[0].clone())
            .clone();
        let default_norm: Vec<&str> = ["area", "volume"]
            .into_iter()
            .filter(|m| schema.shared.iter().any(|s| s == m))
            .collect();
        let list = cfg
            .normalize
            .get_or_insert_with(|| default_norm.join(","))
            .clone();
        let measures: Vec<String> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if !measures.is_empty() {
            data = normalize_confound(&data, &measures, &confound)?;
        }
    }
    let seed = *cfg.seed.get_or_insert(0);
    let folds = *cfg.folds.get_or_insert(5);
    let mut variants = vec![Variant::base()];
    variants.extend(data.imputed.iter().map(|b| Variant::with(&b.tag)));
    let dcfg = DownstreamConfig {
        folds,
        seed,
        ..DownstreamConfig::default()
    };
    let report = downstream(&data, &variants, &dcfg)?;
    let dir = prepare_output(cfg)?;
    write_atomic(&dir.join("downstream.csv"), &report.to_csv()?)?;
    let json = serde_json::to_vec_pretty(&report)?;
    write_atomic(&dir.join("downstream.json"), &json)?;
    let table = report.table();
    write_atomic(&dir.join("downstream_report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn evaluate_score(cfg: &mut RunConfig) -> Result<()> {
    let (schema, data) = load_data(cfg)?;
    let extras = cfg.extra_imputed.get_or_insert_with(Vec::new).clone();
    if extras.is_empty() {
        return Err(Error::Config(
            "score mode needs --extra-imputed predictions".into(),
        ));
    }
    let truth: Vec<crate::math::Matrix> = data
        .subjects
        .iter()
        .map(|s| {
            s.target.clone().ok_or_else(|| {
                Error::Schema(format!(
                    "subject {} has no target measurements to score against",
                    s.id
                ))
            })
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<(String, String, Scores)> = Vec::new();
    for spec in &extras {
        let (tag, preds) = load_extra(spec, &schema)?;
        let merged = merge_predictions(&data, &preds, &tag)?;
        let block = merged.imputed.last().expect("just merged");
        let triple = error_triple(&block.values, &truth)?;
        rows.push((tag.clone(), "all".into(), triple.overall));
        for (m, s) in schema.target.iter().zip(triple.per_measurement) {
            rows.push((tag.clone(), m.clone(), s));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "measurement", "mse", "mae", "mre"])?;
    let mut table = format!(
        "{:<20} {:<24} {:>12} {:>12} {:>12}\n",
        "method", "measurement", "MSE", "MAE", "MRE"
    );
    for (tag, m, s) in &rows {
        w.write_record([
            tag.clone(),
            m.clone(),
            s.mse.to_string(),
            s.mae.to_string(),
            s.mre.to_string(),
        ])?;
        table.push_str(&format!(
            "{tag:<20} {m:<24} {:>12.6} {:>12.6} {:>12.4}\n",
            s.mse, s.mae, s.mre
        ));
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv buffer: {e}")))?;
    let dir = prepare_output(cfg)?;
    write_atomic(&dir.join("scores.csv"), &bytes)?;
    write_atomic(&dir.join("scores.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_explain(cfg: &mut RunConfig) -> Result<()> {
    let model = LoadedModel::load(&RunConfig::required(&cfg.model, "model")?)?;
    let (_, data) = load_data(cfg)?;
    model.check_schema(&data.schema)?;
    let model = model.graph_model("explain")?;
    let d = ExplainConfig::default();
    let task: Task = cfg
        .task
        .get_or_insert_with(|| d.task.name().into())
        .parse()?;
    let ec = ExplainConfig {
        task,
        iterations: *cfg.iterations.get_or_insert(d.iterations),
        sparsity_weight: *cfg.sparsity.get_or_insert(d.sparsity_weight),
        seed: *cfg.seed.get_or_insert(d.seed),
        ..d
    };
    let data = match cfg.max_subjects {
        Some(n) => data.select(&(0..n.min(data.len())).collect::<Vec<_>>()),
        None => data,
    };
    let report = explain(&model, &data, &ec)?;
    let dir = prepare_output(cfg)?;
    report.save(&dir)?;
    println!("top edges ({} task):", report.config.task);
    for e in report.edges.iter().take(10) {
        println!("  {:<28} {:<28} {:.4}", e.node_a, e.node_b, e.weight);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_export_embeddings(cfg: &mut RunConfig) -> Result<()> {
    let model = LoadedModel::load(&RunConfig::required(&cfg.model, "model")?)?;
    let (_, data) = load_data(cfg)?;
    model.check_schema(&data.schema)?;
    let model = model.graph_model("export-embeddings")?;
    let dir = prepare_output(cfg)?;
    let path = dir.join("embeddings.csv");
    export_embeddings(&model, &data, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
