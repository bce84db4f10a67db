//! Seeded synthetic cohorts: a source cohort with shared and target
//! measurements and a target cohort with the shared ones only.
//!
//! Per subject: a latent `z ~ N(0, 1)`, a label `y ~ Bernoulli(0.5)`, and a
//! brain size `exp(SIZE_SD * n + size_sex_shift * (y - 1/2))` recorded as
//! the `supratentorial_volume` confound. Standardized regional values are
//! `level + loading * z + noise`, smoothed once over the graph with weight
//! `coupling`, then mapped to measurement units; area-like and volume-like
//! columns scale with brain size. Each target is an affine function of the
//! ROI's own standardized shared values, plus `coupling` times a linear
//! term in its neighbors' mean, plus `sex_effect * y` on the affected ROIs,
//! plus `N(0, noise_sd)` noise.
//!
//! Every subject draws from its own generator keyed by (seed, cohort,
//! index), so growing a cohort never changes the subjects already in it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DatasetSchema, Subject};
use crate::error::{Error, Result};
use crate::graph::RoiGraph;
use crate::math::Matrix;

pub const LABEL_COLUMN: &str = "sex";
pub const SIZE_CONFOUND: &str = "supratentorial_volume";
/// Spread of log brain size within a sex group.
pub const SIZE_SD: f64 = 0.08;
/// Baseline brain size, in mm^3.
pub const SIZE_BASE: f64 = 1.0e6;
/// Spread of the per-ROI raw noise, before smoothing.
const SHARED_NOISE_SD: f64 = 1.0;
/// Magnitude range of the neighbor coefficients. Kept large so the neighbor
/// term carries information an ROI-local model cannot recover.
const NEIGHBOR_SCALE: (f64, f64) = (2.5, 5.0);
const TARGET_INTERCEPT: f64 = 3.0;

const SHARED_NAMES: [&str; 3] = ["thickness", "area", "volume"];
const TARGET_NAMES: [&str; 2] = ["mean_curvature", "gaussian_curvature"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SynthConfig {
    pub v: usize,
    pub p: usize,
    pub q: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub sex_effect: f64,
    pub coupling: f64,
    pub noise_sd: f64,
    pub affected_fraction: f64,
    /// Difference in mean log brain size between the label groups.
    pub size_sex_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            v: 34,
            p: 3,
            q: 2,
            n_source: 256,
            n_target: 256,
            sex_effect: 1.0,
            coupling: 0.5,
            noise_sd: 0.1,
            affected_fraction: 0.5,
            size_sex_shift: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.v == 0 || self.p == 0 || self.q == 0 {
            return bad("v, p and q must be positive".into());
        }
        if self.n_source == 0 {
            return bad("n-source must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!(
                "coupling must lie in [0, 1], got {}",
                self.coupling
            ));
        }
        if !(0.0..=1.0).contains(&self.affected_fraction) {
            return bad(format!(
                "affected fraction must lie in [0, 1], got {}",
                self.affected_fraction
            ));
        }
        for (name, v) in [
            ("noise-sd", self.noise_sd),
            ("sex-effect", self.sex_effect),
            ("size-sex-shift", self.size_sex_shift),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.noise_sd < 0.0 {
            return bad("noise-sd must be non-negative".into());
        }
        Ok(())
    }

    pub fn shared_names(&self) -> Vec<String> {
        (0..self.p)
            .map(|k| {
                SHARED_NAMES
                    .get(k)
                    .map_or(format!("shared{k}"), |s| s.to_string())
            })
            .collect()
    }

    pub fn target_names(&self) -> Vec<String> {
        (0..self.q)
            .map(|k| {
                TARGET_NAMES
                    .get(k)
                    .map_or(format!("target{k}"), |s| s.to_string())
            })
            .collect()
    }

    pub fn schema(&self, graph: &RoiGraph) -> DatasetSchema {
        DatasetSchema {
            roi_names: graph.names().to_vec(),
            shared: self.shared_names(),
            target: self.target_names(),
            label_column: Some(LABEL_COLUMN.into()),
            confounds: vec![SIZE_CONFOUND.into()],
        }
    }
}

/// Unit conversion for shared measurement `k`: `(center, spread, size
/// scaling)`. Size-scaled measures are log-normal around `center`.
fn unit(k: usize) -> (f64, f64, bool) {
    match k {
        0 => (2.5, 0.3, false),
        1 => (2000.0, 0.25, true),
        2 => (5000.0, 0.25, true),
        _ => (1.0, 0.2, false),
    }
}

/// Fixed affine map from a measured value back to a standardized score;
/// targets are linear in these.
fn standardized(k: usize, value: f64) -> f64 {
    let (center, spread, scaled) = unit(k);
    if scaled {
        (value - center) / (center * spread)
    } else {
        (value - center) / spread
    }
}

/// Generating parameters, kept for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// `v x p` regional levels of the standardized shared values.
    pub level: Matrix,
    /// `v x p` loadings on the latent `z`.
    pub loading: Matrix,
    /// `v x q` target intercepts.
    pub intercept: Matrix,
    /// One `p x q` own-ROI coefficient block per ROI.
    pub own: Vec<Matrix>,
    /// `p x q` coefficients on the neighbor mean (scaled by `coupling`).
    pub neighbor: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True target blocks of the target cohort, in subject order.
    pub target_cohort: Vec<Matrix>,
    /// ROIs whose targets carry the sex shift.
    pub affected: Vec<bool>,
    pub coefficients: Coefficients,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub source: Dataset,
    /// Shared block only.
    pub target: Dataset,
    pub truth: GroundTruth,
}

impl Synthetic {
    /// The target cohort with its hidden target block restored.
    pub fn target_with_truth(&self) -> Dataset {
        let mut d = self.target.clone();
        d.schema = self.source.schema.clone();
        for (s, t) in d.subjects.iter_mut().zip(&self.truth.target_cohort) {
            s.target = Some(t.clone());
        }
        d
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn subject_rng(seed: u64, cohort: u64, index: usize) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ splitmix(cohort.wrapping_add(1) << 40 | index as u64));
    ChaCha8Rng::seed_from_u64(key)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    graph: &'a RoiGraph,
    coef: Coefficients,
    affected: Vec<bool>,
}

impl Generator<'_> {
    fn neighbor_mean(&self, x: &Matrix, roi: usize, col: usize) -> Option<f64> {
        let nb = self.graph.neighbors(roi);
        if nb.is_empty() {
            return None;
        }
        Some(nb.iter().map(|&j| x.get(j, col)).sum::<f64>() / nb.len() as f64)
    }

    fn subject(&self, cohort: u64, index: usize) -> (Subject, Matrix) {
        let cfg = self.cfg;
        let (v, p, q) = (cfg.v, cfg.p, cfg.q);
        let mut rng = subject_rng(cfg.seed, cohort, index);
        let z = normal(&mut rng);
        let y: u8 = rng.gen_bool(0.5).into();
        let log_size = SIZE_SD * normal(&mut rng) + cfg.size_sex_shift * (f64::from(y) - 0.5);
        let size = SIZE_BASE * log_size.exp();

        let raw = Matrix::from_fn(v, p, |i, k| {
            self.coef.level.get(i, k) + self.coef.loading.get(i, k) * z
        });
        let raw = Matrix::from_fn(v, p, |i, k| {
            raw.get(i, k) + SHARED_NOISE_SD * normal(&mut rng)
        });
        let smooth = Matrix::from_fn(v, p, |i, k| match self.neighbor_mean(&raw, i, k) {
            Some(m) => (1.0 - cfg.coupling) * raw.get(i, k) + cfg.coupling * m,
            None => raw.get(i, k),
        });
        let shared = Matrix::from_fn(v, p, |i, k| {
            let (center, spread, scaled) = unit(k);
            let s = smooth.get(i, k);
            if scaled {
                center * (spread * s).exp() * (size / SIZE_BASE)
            } else {
                center + spread * s
            }
        });

        let u = Matrix::from_fn(v, p, |i, k| standardized(k, shared.get(i, k)));
        let mut target = self.coef.intercept.clone();
        for i in 0..v {
            let nb_mean: Vec<f64> = (0..p)
                .map(|k| self.neighbor_mean(&u, i, k).unwrap_or(0.0))
                .collect();
            for c in 0..q {
                let mut t = target.get(i, c);
                for k in 0..p {
                    t += self.coef.own[i].get(k, c) * u.get(i, k);
                    t += cfg.coupling * self.coef.neighbor.get(k, c) * nb_mean[k];
                }
                if self.affected[i] {
                    t += cfg.sex_effect * f64::from(y);
                }
                target.set(i, c, t);
            }
        }
        for val in target.as_mut_slice() {
            *val += cfg.noise_sd * normal(&mut rng);
        }
        let prefix = if cohort == 0 { "src" } else { "tgt" };
        (
            Subject {
                id: format!("{prefix}-{:05}", index + 1),
                shared,
                target: None,
                label: Some(y),
                confounds: vec![size],
            },
            target,
        )
    }
}

pub fn generate(cfg: &SynthConfig, graph: &RoiGraph) -> Result<Synthetic> {
    cfg.validate()?;
    if graph.node_count() != cfg.v {
        return Err(Error::Config(format!(
            "graph has {} nodes but v = {}",
            graph.node_count(),
            cfg.v
        )));
    }
    let (v, p, q) = (cfg.v, cfg.p, cfg.q);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
    let level = Matrix::from_fn(v, p, |_, _| normal(&mut rng));
    let loading = Matrix::from_fn(v, p, |_, _| rng.gen_range(0.5..1.0));
    let base = Matrix::from_fn(p, q, |_, _| 0.5 * normal(&mut rng));
    let own = (0..v)
        .map(|_| {
            Matrix::from_fn(p, q, |k, c| {
                base.get(k, c) * (1.0 + 0.05 * normal(&mut rng))
            })
        })
        .collect();
    let neighbor = Matrix::from_fn(p, q, |_, _| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(NEIGHBOR_SCALE.0..NEIGHBOR_SCALE.1)
    });
    let intercept = Matrix::from_fn(v, q, |_, _| TARGET_INTERCEPT + 0.05 * normal(&mut rng));
    let mut order: Vec<usize> = (0..v).collect();
    order.shuffle(&mut rng);
    let n_affected = (cfg.affected_fraction * v as f64).round() as usize;
    let mut affected = vec![false; v];
    order[..n_affected].iter().for_each(|&i| affected[i] = true);

    let gen = Generator {
        cfg,
        graph,
        coef: Coefficients {
            level,
            loading,
            intercept,
            own,
            neighbor,
        },
        affected,
    };
    let schema = cfg.schema(graph);
    let source = (0..cfg.n_source)
        .map(|i| {
            let (mut s, t) = gen.subject(0, i);
            s.target = Some(t);
            s
        })
        .collect();
    let (target, truth): (Vec<Subject>, Vec<Matrix>) =
        (0..cfg.n_target).map(|i| gen.subject(1, i)).unzip();
    Ok(Synthetic {
        source: Dataset::new(schema.clone(), source),
        target: Dataset::new(schema.without_target(), target),
        truth: GroundTruth {
            target_cohort: truth,
            affected: gen.affected,
            coefficients: gen.coef,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub name: String,
    pub subjects: usize,
    /// Count per label value; unlabeled subjects are not counted.
    pub labels: BTreeMap<u8, usize>,
    pub columns: Vec<ColumnStats>,
}

fn column_stats(name: String, values: &[f64]) -> ColumnStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    ColumnStats {
        name,
        mean,
        sd: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Per-column mean, sd, min, and max plus label balance. An empty cohort
/// yields a summary without columns.
pub fn describe(name: &str, data: &Dataset) -> CohortSummary {
    let mut labels = BTreeMap::new();
    for s in &data.subjects {
        if let Some(l) = s.label {
            *labels.entry(l).or_insert(0) += 1;
        }
    }
    let mut columns = Vec::new();
    if !data.is_empty() {
        for (ci, c) in data.schema.confounds.iter().enumerate() {
            let vals: Vec<f64> = data.subjects.iter().map(|s| s.confounds[ci]).collect();
            columns.push(column_stats(c.clone(), &vals));
        }
        let blocks: [(&[String], bool); 2] =
            [(&data.schema.shared, false), (&data.schema.target, true)];
        for (measurements, is_target) in blocks {
            for (r, roi) in data.schema.roi_names.iter().enumerate() {
                for (k, m) in measurements.iter().enumerate() {
                    let vals: Vec<f64> = data
                        .subjects
                        .iter()
                        .filter_map(|s| {
                            let block = if is_target {
                                s.target.as_ref()?
                            } else {
                                &s.shared
                            };
                            Some(block.get(r, k))
                        })
                        .collect();
                    if !vals.is_empty() {
                        columns.push(column_stats(format!("{roi}.{m}"), &vals));
                    }
                }
            }
        }
    }
    CohortSummary {
        name: name.to_string(),
        subjects: data.len(),
        labels,
        columns,
    }
}

impl CohortSummary {
    pub fn to_text(&self) -> String {
        let mut out = format!("cohort {}: {} subjects", self.name, self.subjects);
        for (l, c) in &self.labels {
            out.push_str(&format!(", label {l}: {c}"));
        }
        out.push('\n');
        if !self.columns.is_empty() {
            out.push_str(&format!(
                "{:<40} {:>14} {:>14} {:>14} {:>14}\n",
                "column", "mean", "sd", "min", "max"
            ));
        }
        for c in &self.columns {
            out.push_str(&format!(
                "{:<40} {:>14.6} {:>14.6} {:>14.6} {:>14.6}\n",
                c.name, c.mean, c.sd, c.min, c.max
            ));
        }
        out
    }
}
