//! Independent references shared by the oracle tests and the acceptance run.

use dagi::dataio::{Dataset, DatasetSchema, Subject};
use dagi::math::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Solves `a x = b` for every column of `b`.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for r in (0..n).rev() {
        for c in 0..m {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k][c]).sum();
            x[r][c] = (b[r][c] - s) / a[r][r];
        }
    }
    x
}

/// Coefficients `(weight d x m, bias 1 x m)` of the affine least-squares fit,
/// from the raw normal equations `[X 1]^T [X 1] beta = [X 1]^T y` with no
/// centering, scaling or factorization.
pub fn normal_equations(x: &Matrix, y: &Matrix) -> (Matrix, Matrix) {
    let (n, d) = x.shape();
    let m = y.cols();
    let aug = |r: usize, c: usize| if c < d { x.get(r, c) } else { 1.0 };
    let gram: Vec<Vec<f64>> = (0..=d)
        .map(|i| {
            (0..=d)
                .map(|j| (0..n).map(|r| aug(r, i) * aug(r, j)).sum())
                .collect()
        })
        .collect();
    let rhs: Vec<Vec<f64>> = (0..=d)
        .map(|i| {
            (0..m)
                .map(|c| (0..n).map(|r| aug(r, i) * y.get(r, c)).sum())
                .collect()
        })
        .collect();
    let beta = gauss_solve(gram, rhs);
    (
        Matrix::from_fn(d, m, |r, c| beta[r][c]),
        Matrix::from_fn(1, m, |_, c| beta[d][c]),
    )
}

/// Noisy affine data with columns on very different scales.
pub fn affine_dataset(seed: u64, v: usize, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, q) = (3, 2);
    let schema = DatasetSchema {
        roi_names: (0..v).map(|i| format!("roi{i}")).collect(),
        shared: vec!["thick".into(), "area".into(), "vol".into()],
        target: vec!["curv".into(), "gauss".into()],
        label_column: None,
        confounds: vec![],
    };
    let scales = [2.5, 1500.0, 9000.0];
    let w = super::normal_matrix(&mut rng, p, q);
    let subjects = (0..n)
        .map(|i| {
            let shared = Matrix::from_fn(v, p, |_, c| {
                scales[c] * (1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal))
            });
            let target = Matrix::from_fn(v, q, |r, c| {
                let lin: f64 = (0..p)
                    .map(|k| shared.get(r, k) / scales[k] * w.get(k, c))
                    .sum();
                lin + 0.3 * r as f64 + 0.1 * rng.sample::<f64, _>(StandardNormal)
            });
            Subject {
                id: format!("s{i}"),
                shared,
                target: Some(target),
                label: None,
                confounds: vec![],
            }
        })
        .collect();
    Dataset::new(schema, subjects)
}

/// Exact two-sided binomial test by direct summation of `C(n, i) / 2^n`.
pub fn exact_binomial(b: usize, c: usize) -> f64 {
    let n = b + c;
    let k = b.min(c);
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=k {
        tail += term;
        term *= (n - i) as f64 / (i + 1) as f64;
    }
    (2.0 * tail).min(1.0)
}

/// Integral of `|Qa(u) - Qb(u)|` over `u` in (0, 1), with both empirical
/// quantile functions piecewise constant between the merged breakpoints
/// `i / na` and `j / nb`.
pub fn quantile_integral(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let mut cuts: Vec<(usize, usize)> = (0..=na).map(|i| (i * nb, na * nb)).collect();
    cuts.extend((0..=nb).map(|j| (j * na, na * nb)));
    cuts.sort();
    cuts.dedup();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0].0, w[1].0);
        // Any u inside (lo, hi) / (na*nb) picks the same order statistics.
        let mid2 = lo + hi;
        let ia = (mid2 * na) / (2 * na * nb);
        let ib = (mid2 * nb) / (2 * na * nb);
        let width = (hi - lo) as f64 / (na * nb) as f64;
        total += width * (a[ia] - b[ib]).abs();
    }
    total
}
