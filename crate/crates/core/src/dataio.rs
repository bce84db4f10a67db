//! Tabular cohorts on disk.
//!
//! A cohort CSV has one row per subject. Columns, in order:
//! `subject_id`, the label column (if the schema names one), the confound
//! columns, then `{roi}.{measurement}` for every shared measurement
//! (region-major), then the same for every target measurement.
//! Imputed columns appended by [`merge_predictions`] follow as
//! `{roi}.{measurement}.{tag}`.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::Matrix;

pub const SUBJECT_ID: &str = "subject_id";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub roi_names: Vec<String>,
    pub shared: Vec<String>,
    #[serde(default)]
    pub target: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub confounds: Vec<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.roi_names.iter() {
            if name.is_empty() || name.contains(',') || !seen.insert(name) {
                return Err(Error::Schema(format!("bad or duplicate ROI name {name:?}")));
            }
        }
        let mut seen = HashSet::new();
        for name in self.shared.iter().chain(&self.target) {
            if name.is_empty() || name.contains(',') || name.contains('.') || !seen.insert(name) {
                return Err(Error::Schema(format!(
                    "bad or duplicate measurement name {name:?}"
                )));
            }
        }
        if self.roi_names.is_empty() || self.shared.is_empty() {
            return Err(Error::Schema(
                "schema needs at least one ROI and one shared measurement".into(),
            ));
        }
        Ok(())
    }

    /// Same schema with the target block dropped, as for a cohort that
    /// lacks those measurements.
    pub fn without_target(&self) -> Self {
        Self {
            target: Vec::new(),
            ..self.clone()
        }
    }

    pub fn value_columns(&self, measurements: &[String]) -> Vec<String> {
        self.roi_names
            .iter()
            .flat_map(|r| measurements.iter().map(move |m| format!("{r}.{m}")))
            .collect()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec![SUBJECT_ID.to_string()];
        cols.extend(self.label_column.iter().cloned());
        cols.extend(self.confounds.iter().cloned());
        cols.extend(self.value_columns(&self.shared));
        cols.extend(self.value_columns(&self.target));
        cols
    }

    /// Hash over ROI names, `v`, and shared measurement names: the part of
    /// the schema a trained model depends on.
    pub fn shared_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("v={}\n", self.roi_names.len()));
        for r in &self.roi_names {
            h.update(format!("roi:{r}\n"));
        }
        for m in &self.shared {
            h.update(format!("shared:{m}\n"));
        }
        hex(&h.finalize())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// `v x p`
    pub shared: Matrix,
    /// `v x q`; `None` when the cohort does not carry the target block.
    pub target: Option<Matrix>,
    pub label: Option<u8>,
    /// Values in schema confound order.
    pub confounds: Vec<f64>,
}

/// Imputed values appended to a cohort under a method tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedColumns {
    pub tag: String,
    pub measurements: Vec<String>,
    /// One `v x measurements.len()` block per subject, in subject order.
    pub values: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub subjects: Vec<Subject>,
    pub imputed: Vec<ImputedColumns>,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, subjects: Vec<Subject>) -> Self {
        Self {
            schema,
            subjects,
            imputed: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Subset by index, keeping imputed blocks aligned.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            imputed: self
                .imputed
                .iter()
                .map(|b| ImputedColumns {
                    tag: b.tag.clone(),
                    measurements: b.measurements.clone(),
                    values: indices.iter().map(|&i| b.values[i].clone()).collect(),
                })
                .collect(),
        }
    }

    /// Drops appended imputed columns.
    pub fn project_original(&self) -> Dataset {
        Dataset::new(self.schema.clone(), self.subjects.clone())
    }

    pub fn labels(&self) -> Result<Vec<u8>> {
        self.subjects
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::Schema(format!("subject {} has no label", s.id)))
            })
            .collect()
    }

    pub fn confound_index(&self, name: &str) -> Result<usize> {
        self.schema
            .confounds
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("no confound column {name:?}")))
    }

    fn header(&self) -> Vec<String> {
        let mut cols = self.schema.columns();
        for block in &self.imputed {
            for r in &self.schema.roi_names {
                for m in &block.measurements {
                    cols.push(format!("{r}.{m}.{}", block.tag));
                }
            }
        }
        cols
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for (si, s) in self.subjects.iter().enumerate() {
            let mut rec = vec![s.id.clone()];
            if self.schema.label_column.is_some() {
                rec.push(s.label.map(|l| l.to_string()).unwrap_or_default());
            }
            rec.extend(s.confounds.iter().map(|v| v.to_string()));
            rec.extend(s.shared.as_slice().iter().map(|v| v.to_string()));
            if !self.schema.target.is_empty() {
                let t = s.target.as_ref().ok_or_else(|| {
                    Error::Schema(format!("subject {} lacks the target block", s.id))
                })?;
                rec.extend(t.as_slice().iter().map(|v| v.to_string()));
            }
            for block in &self.imputed {
                rec.extend(block.values[si].as_slice().iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }
}

fn parse_cell(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        line,
        message: format!("column {column}: non-numeric value {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line,
            message: format!("column {column}: non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

/// Reads a cohort whose header must equal `schema.columns()` exactly.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes, schema, path)
}

pub fn parse_csv(bytes: &[u8], schema: &DatasetSchema, path: &Path) -> Result<Dataset> {
    schema.validate()?;
    let fmt = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let expected = schema.columns();
    if header != expected {
        let present: HashSet<&String> = header.iter().collect();
        let missing: Vec<&String> = expected.iter().filter(|c| !present.contains(c)).collect();
        let wanted: HashSet<&String> = expected.iter().collect();
        let extra: Vec<&String> = header.iter().filter(|c| !wanted.contains(c)).collect();
        let message = if !missing.is_empty() {
            format!("missing column(s): {}", join(&missing))
        } else if !extra.is_empty() {
            format!("unexpected column(s): {}", join(&extra))
        } else {
            let pos = header
                .iter()
                .zip(&expected)
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            format!(
                "column order differs at position {}: found {:?}, expected {:?}",
                pos + 1,
                header.get(pos),
                expected.get(pos)
            )
        };
        return Err(fmt(1, message));
    }

    let v = schema.roi_names.len();
    let (p, q) = (schema.shared.len(), schema.target.len());
    let n_conf = schema.confounds.len();
    let has_label = schema.label_column.is_some();
    let mut subjects = Vec::new();
    let mut ids = HashSet::new();
    for (ri, rec) in rdr.records().enumerate() {
        let line = ri + 2;
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(fmt(
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(fmt(line, "empty subject id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(fmt(line, format!("duplicate subject id {id:?}")));
        }
        let mut col = 1;
        let label = if has_label {
            let cell = rec[col].trim();
            col += 1;
            match cell {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => {
                    return Err(fmt(
                        line,
                        format!(
                            "column {}: label must be 0 or 1, got {other:?}",
                            expected[col - 1]
                        ),
                    ))
                }
            }
        } else {
            None
        };
        let mut confounds = Vec::with_capacity(n_conf);
        for _ in 0..n_conf {
            confounds.push(parse_cell(path, line, &expected[col], &rec[col])?);
            col += 1;
        }
        let read_block = |width: usize, col: &mut usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity(v * width);
            for _ in 0..v * width {
                data.push(parse_cell(path, line, &expected[*col], &rec[*col])?);
                *col += 1;
            }
            Matrix::from_vec(v, width, data)
        };
        let shared = read_block(p, &mut col)?;
        let target = if q > 0 {
            Some(read_block(q, &mut col)?)
        } else {
            None
        };
        subjects.push(Subject {
            id,
            shared,
            target,
            label,
            confounds,
        });
    }
    Ok(Dataset::new(schema.clone(), subjects))
}

fn join(items: &[&String]) -> String {
    items
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Divides the named shared measurements of every ROI by each subject's
/// confound value. Target and imputed columns are left as they are.
pub fn normalize_confound(
    data: &Dataset,
    measurements: &[String],
    confound: &str,
) -> Result<Dataset> {
    let ci = data.confound_index(confound)?;
    let cols: Vec<usize> = measurements
        .iter()
        .map(|m| {
            data.schema
                .shared
                .iter()
                .position(|s| s == m)
                .ok_or_else(|| {
                    Error::Schema(format!(
                        "{m:?} is not a shared measurement; only shared columns can be normalized"
                    ))
                })
        })
        .collect::<Result<_>>()?;
    let mut out = data.clone();
    for s in &mut out.subjects {
        let c = s.confounds[ci];
        if !(c > 0.0) {
            return Err(Error::Contract(format!(
                "subject {}: confound {confound} must be positive, got {c}",
                s.id
            )));
        }
        for r in 0..s.shared.rows() {
            for &k in &cols {
                let v = s.shared.get(r, k);
                s.shared.set(r, k, v / c);
            }
        }
    }
    Ok(out)
}

/// Per-subject imputed blocks produced by one method.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub tag: Option<String>,
    pub measurements: Vec<String>,
    pub ids: Vec<String>,
    pub values: Vec<Matrix>,
    /// Predicted probability of label 1, when the method produces one.
    pub label_prob: Option<Vec<f64>>,
}

impl Predictions {
    pub fn to_csv_bytes(&self, roi_names: &[String]) -> Result<Vec<u8>> {
        let suffix = self
            .tag
            .as_ref()
            .map(|t| format!(".{t}"))
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![SUBJECT_ID.to_string()];
        for r in roi_names {
            for m in &self.measurements {
                header.push(format!("{r}.{m}{suffix}"));
            }
        }
        if self.label_prob.is_some() {
            header.push(format!("label_prob{suffix}"));
        }
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values[i].as_slice().iter().map(|v| v.to_string()));
            if let Some(p) = &self.label_prob {
                rec.push(p[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
    }

    pub fn save_csv(&self, path: &Path, roi_names: &[String]) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes(roi_names)?)
    }
}

/// Reads predicted `{roi}.{measurement}` blocks from any CSV with a
/// `subject_id` column. Each value column may be bare or carry one
/// `.{tag}` suffix, used consistently; unrelated columns are ignored, so a
/// ground-truth cohort file can be read as "perfect" predictions.
pub fn load_predictions(
    path: &Path,
    roi_names: &[String],
    measurements: &[String],
) -> Result<Predictions> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let id_col = header
        .iter()
        .position(|h| h == SUBJECT_ID)
        .ok_or_else(|| fmt(1, format!("missing column {SUBJECT_ID}")))?;

    let first = format!("{}.{}", roi_names[0], measurements[0]);
    let tag = if header.contains(&first) {
        None
    } else {
        let prefix = format!("{first}.");
        let tags: Vec<&str> = header
            .iter()
            .filter_map(|h| h.strip_prefix(&prefix))
            .filter(|t| !t.contains('.'))
            .collect();
        match tags.as_slice() {
            [t] => Some(t.to_string()),
            [] => return Err(fmt(1, format!("missing column {first}"))),
            many => {
                return Err(fmt(
                    1,
                    format!("ambiguous method tags for {first}: {}", many.join(", ")),
                ))
            }
        }
    };
    let suffix = tag.as_ref().map(|t| format!(".{t}")).unwrap_or_default();
    let index: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let mut cols = Vec::new();
    for r in roi_names {
        for m in measurements {
            let name = format!("{r}.{m}{suffix}");
            let c = *index
                .get(name.as_str())
                .ok_or_else(|| fmt(1, format!("missing column {name}")))?;
            cols.push((c, name));
        }
    }
    let prob_col = index.get(format!("label_prob{suffix}").as_str()).copied();

    let (v, q) = (roi_names.len(), measurements.len());
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut probs = Vec::new();
    let mut seen = HashSet::new();
    for (ri, rec) in rdr.records().enumerate() {
        let line = ri + 2;
        let rec = rec?;
        let id = rec[id_col].to_string();
        if !seen.insert(id.clone()) {
            return Err(fmt(line, format!("duplicate subject id {id:?}")));
        }
        let mut data = Vec::with_capacity(v * q);
        for (c, name) in &cols {
            data.push(parse_cell(path, line, name, &rec[*c])?);
        }
        values.push(Matrix::from_vec(v, q, data)?);
        if let Some(pc) = prob_col {
            probs.push(parse_cell(path, line, "label_prob", &rec[pc])?);
        }
        ids.push(id);
    }
    Ok(Predictions {
        tag,
        measurements: measurements.to_vec(),
        ids,
        values,
        label_prob: prob_col.map(|_| probs),
    })
}

/// Appends imputed columns under `tag`, matching rows by subject id.
pub fn merge_predictions(data: &Dataset, preds: &Predictions, tag: &str) -> Result<Dataset> {
    if tag.is_empty() || tag.contains(',') || tag.contains('.') {
        return Err(Error::Schema(format!("invalid method tag {tag:?}")));
    }
    if data.imputed.iter().any(|b| b.tag == tag) {
        return Err(Error::Schema(format!("method tag {tag:?} already merged")));
    }
    let by_id: HashMap<&str, usize> = preds
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let known: HashSet<&str> = data.subjects.iter().map(|s| s.id.as_str()).collect();
    let unknown: Vec<&str> = preds
        .ids
        .iter()
        .map(String::as_str)
        .filter(|id| !known.contains(id))
        .collect();
    let missing: Vec<&str> = data
        .subjects
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !unknown.is_empty() || !missing.is_empty() {
        return Err(Error::Schema(format!(
            "subject ids do not align; unknown in predictions: [{}]; without predictions: [{}]",
            unknown.join(", "),
            missing.join(", ")
        )));
    }
    let v = data.schema.roi_names.len();
    let mut values = Vec::with_capacity(data.len());
    for s in &data.subjects {
        let block = &preds.values[by_id[s.id.as_str()]];
        if block.shape() != (v, preds.measurements.len()) {
            return Err(Error::dim(
                "merge_predictions",
                block.shape(),
                (v, preds.measurements.len()),
            ));
        }
        values.push(block.clone());
    }
    let mut out = data.clone();
    out.imputed.push(ImputedColumns {
        tag: tag.to_string(),
        measurements: preds.measurements.clone(),
        values,
    });
    Ok(out)
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
