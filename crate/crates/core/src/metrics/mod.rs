//! Error scores, cross-validation folds, and the statistical tests used to
//! compare methods.

pub mod special;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

/// How the relative error is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MreKind {
    /// `100 * sum|pred - truth| / sum|truth|`.
    #[default]
    Aggregate,
    /// `100 * mean(|pred - truth| / |truth|)`.
    PerEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mse: f64,
    pub mae: f64,
    /// Percent. `+inf` when truth is all zero and the prediction is not.
    pub mre: f64,
}

/// Scores pooled over every subject, ROI, and measurement, plus one set
/// per measurement column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTriple {
    pub overall: Scores,
    pub per_measurement: Vec<Scores>,
}

#[derive(Default)]
struct Acc {
    sq: f64,
    abs: f64,
    truth_abs: f64,
    rel: f64,
    rel_inf: bool,
    n: usize,
}

impl Acc {
    fn push(&mut self, p: f64, t: f64) {
        let e = p - t;
        self.sq += e * e;
        self.abs += e.abs();
        self.truth_abs += t.abs();
        if t != 0.0 {
            self.rel += e.abs() / t.abs();
        } else if e != 0.0 {
            self.rel_inf = true;
        }
        self.n += 1;
    }

    fn scores(&self, kind: MreKind) -> Scores {
        let n = self.n as f64;
        let mre = match kind {
            MreKind::Aggregate => {
                if self.truth_abs > 0.0 {
                    100.0 * self.abs / self.truth_abs
                } else if self.abs > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            MreKind::PerEntry => {
                if self.rel_inf {
                    f64::INFINITY
                } else {
                    100.0 * self.rel / n
                }
            }
        };
        Scores {
            mse: self.sq / n,
            mae: self.abs / n,
            mre,
        }
    }
}

pub fn error_triple(pred: &[Matrix], truth: &[Matrix]) -> Result<ErrorTriple> {
    error_triple_with(pred, truth, MreKind::Aggregate)
}

/// Scores of per-subject `v x q` prediction blocks against the truth.
pub fn error_triple_with(pred: &[Matrix], truth: &[Matrix], kind: MreKind) -> Result<ErrorTriple> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} prediction blocks for {} truth blocks",
            pred.len(),
            truth.len()
        )));
    }
    let first = truth.first().ok_or(Error::Empty("error_triple"))?;
    if first.is_empty() {
        return Err(Error::Empty("error_triple"));
    }
    let q = first.cols();
    let mut overall = Acc::default();
    let mut cols: Vec<Acc> = (0..q).map(|_| Acc::default()).collect();
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() || t.shape() != first.shape() {
            return Err(Error::dim("error_triple", p.shape(), t.shape()));
        }
        for r in 0..t.rows() {
            for (c, acc) in cols.iter_mut().enumerate() {
                let (pv, tv) = (p.get(r, c), t.get(r, c));
                acc.push(pv, tv);
                overall.push(pv, tv);
            }
        }
    }
    Ok(ErrorTriple {
        overall: overall.scores(kind),
        per_measurement: cols.iter().map(|a| a.scores(kind)).collect(),
    })
}

/// Assignment of subjects to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub fold_of: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.fold_of.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Seeded shuffle, then a contiguous split where the first `n % k` folds
/// take one extra subject. With `labels`, the shuffled subjects are grouped
/// by label and dealt round-robin, so every fold keeps the label ratio.
pub fn kfold(n: usize, k: usize, seed: u64, labels: Option<&[u8]>) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!(
            "cannot split {n} subjects into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    match labels {
        None => {
            let (base, extra) = (n / k, n % k);
            let mut pos = 0;
            for f in 0..k {
                let size = base + usize::from(f < extra);
                for &i in &order[pos..pos + size] {
                    fold_of[i] = f;
                }
                pos += size;
            }
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::Contract(format!(
                    "{} labels for {n} subjects",
                    labels.len()
                )));
            }
            order.sort_by_key(|&i| std::cmp::Reverse(labels[i]));
            for (pos, &i) in order.iter().enumerate() {
                fold_of[i] = pos % k;
            }
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        stratified: labels.is_some(),
        fold_of,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    PairedT,
    #[serde(rename = "mcnemar")]
    McNemar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    pub note: Option<String>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Two-sided paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == d[0]) {
        if d[0] == 0.0 {
            return Ok(TestResult {
                kind: TestKind::PairedT,
                statistic: 0.0,
                p_value: 1.0,
                note: Some("all differences are zero".into()),
            });
        }
        return Err(Error::Stats(
            "differences have zero variance and nonzero mean; t is undefined".into(),
        ));
    }
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    let t = m / (var.sqrt() / (n as f64).sqrt());
    Ok(TestResult {
        kind: TestKind::PairedT,
        statistic: t,
        p_value: special::student_t_two_sided(t, (n - 1) as f64),
        note: None,
    })
}

/// Order-1 Wasserstein distance between two empirical distributions:
/// the integral of `|F_a(x) - F_b(x)|` over the merged support.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein_1d"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        total += (fa - fb).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Stats("prediction and truth lengths differ".into()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("balanced_accuracy"));
    }
    let mut hit = [0usize; 2];
    let mut count = [0usize; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        let t = usize::from(t != 0);
        count[t] += 1;
        if usize::from(p != 0) == t {
            hit[t] += 1;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::Stats(
            "balanced accuracy is undefined when the truth has a single class".into(),
        ));
    }
    Ok(0.5 * (hit[0] as f64 / count[0] as f64 + hit[1] as f64 / count[1] as f64))
}

/// Discordant pair counts below which the exact binomial test is used.
pub const MCNEMAR_EXACT_BELOW: usize = 25;

/// McNemar's test on paired correctness flags. `statistic` is the
/// continuity-corrected chi-squared value; the p-value is exact binomial
/// when fewer than 25 pairs are discordant.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<TestResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Stats("McNemar inputs differ in length".into()));
    }
    let b = correct_a
        .iter()
        .zip(correct_b)
        .filter(|(x, y)| **x && !**y)
        .count();
    let c = correct_a
        .iter()
        .zip(correct_b)
        .filter(|(x, y)| !**x && **y)
        .count();
    let n = b + c;
    if n == 0 {
        return Ok(TestResult {
            kind: TestKind::McNemar,
            statistic: 0.0,
            p_value: 1.0,
            note: Some("no discordant pairs".into()),
        });
    }
    let diff = (b as f64 - c as f64).abs();
    let statistic = (diff - 1.0).max(0.0).powi(2) / n as f64;
    let (p_value, note) = if n < MCNEMAR_EXACT_BELOW {
        let tail = special::binomial_half_cdf(b.min(c) as u64, n as u64);
        (
            (2.0 * tail).min(1.0),
            format!("exact binomial, b={b}, c={c}"),
        )
    } else {
        (
            special::chi2_sf(statistic, 1.0),
            format!("chi-squared with continuity correction, b={b}, c={c}"),
        )
    };
    Ok(TestResult {
        kind: TestKind::McNemar,
        statistic,
        p_value,
        note: Some(note),
    })
}

/// Sample Pearson correlation, computed in two passes.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Stats("pearson inputs differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::Stats("pearson needs at least 2 points".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Stats(
            "pearson correlation of a constant input".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_error_triple() {
        let t = [Matrix::from_rows(&[[1.0, 1.0]])];
        let p = [Matrix::from_rows(&[[2.0, 0.0]])];
        let e = error_triple(&p, &t).unwrap();
        assert_eq!(
            e.overall,
            Scores {
                mse: 1.0,
                mae: 1.0,
                mre: 100.0
            }
        );
        let z = error_triple(&t, &t).unwrap();
        assert_eq!(
            z.overall,
            Scores {
                mse: 0.0,
                mae: 0.0,
                mre: 0.0
            }
        );
        let zero = [Matrix::zeros(1, 2)];
        assert_eq!(error_triple(&p, &zero).unwrap().overall.mre, f64::INFINITY);
    }

    #[test]
    fn fold_sizes() {
        assert_eq!(kfold(10, 5, 1, None).unwrap().sizes(), vec![2; 5]);
        assert_eq!(kfold(11, 5, 1, None).unwrap().sizes(), vec![3, 2, 2, 2, 2]);
        let labels = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let plan = kfold(10, 2, 3, Some(&labels)).unwrap();
        for f in 0..2 {
            let idx = plan.test_indices(f);
            let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((pos, idx.len() - pos), (3, 2));
        }
        assert!(kfold(10, 1, 0, None).is_err());
        assert!(kfold(3, 5, 0, None).is_err());
    }

    #[test]
    fn t_test_cases() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.statistic - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((r.p_value - 0.074_179_900_227_448_53).abs() < 1e-9);
        let same = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
        assert!(paired_t_test(&[2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein_1d(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(wasserstein_1d(&[1.0, 5.0], &[5.0, 1.0]).unwrap(), 0.0);
        // {0,1} vs {0,0,3}: |F_a - F_b| is 1/6 on [0,1) and 1/3 on [1,3).
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 3.0]).unwrap();
        assert!((w - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&[1, 0], &[1, 0]).unwrap(), 1.0);
        let mut truth = vec![0u8; 90];
        truth.extend([1u8; 10]);
        assert_eq!(balanced_accuracy(&[0; 100], &truth).unwrap(), 0.5);
        let pred = [1, 1, 1, 0, 0, 1];
        let truth = [1, 1, 1, 1, 0, 0];
        assert_eq!(balanced_accuracy(&pred, &truth).unwrap(), 0.625);
        assert!(balanced_accuracy(&[1], &[1]).is_err());
    }

    #[test]
    fn mcnemar_cases() {
        let a = vec![true; 10];
        let b = vec![false; 10];
        let r = mcnemar(&a, &b).unwrap();
        assert!((r.p_value - 0.001_953_125).abs() < 1e-15);
        assert_eq!(mcnemar(&a, &a).unwrap().p_value, 1.0);
        let r = mcnemar(&[true, false], &[false, true]).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0; 4]).is_err());
    }
}
