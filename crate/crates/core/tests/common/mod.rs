#![allow(dead_code)]

pub mod fd;
pub mod oracle;
pub mod perm;

use dagi::dataio::{Dataset, DatasetSchema, Subject};
use dagi::graph::RoiGraph;
use dagi::math::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Ten ROIs: a ring over r0..r8 with chords, plus the leaf r9 hanging off
/// r0. The target of r9 is r0's first feature; every other target is zero.
/// Feature 1 flags r9, so only the edge (r0, r9) carries target signal.
pub struct Planted {
    pub graph: RoiGraph,
    pub data: Dataset,
    pub edge: (String, String),
}

pub fn planted(seed: u64, n: usize) -> Planted {
    let names: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
    let mut pairs: Vec<(usize, usize)> = (0..9).map(|i| (i, (i + 1) % 9)).collect();
    pairs.extend([(0, 4), (2, 6), (3, 7), (0, 9)]);
    let graph = RoiGraph::new(names.clone(), pairs).unwrap();
    let schema = DatasetSchema {
        roi_names: names,
        shared: vec!["noise".into(), "flag".into()],
        target: vec!["signal".into()],
        label_column: None,
        confounds: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|s| {
            let shared = Matrix::from_fn(10, 2, |i, k| {
                if k == 0 {
                    rng.sample(StandardNormal)
                } else {
                    f64::from(i == 9)
                }
            });
            let target = Matrix::from_fn(10, 1, |i, _| if i == 9 { shared.get(0, 0) } else { 0.0 });
            Subject {
                id: format!("s{s:04}"),
                shared,
                target: Some(target),
                label: None,
                confounds: vec![],
            }
        })
        .collect();
    Planted {
        graph,
        data: Dataset::new(schema, subjects),
        edge: ("r0".into(), "r9".into()),
    }
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A ring over `v` named nodes plus `chords` random extra edges.
pub fn random_graph(rng: &mut ChaCha8Rng, v: usize, chords: usize) -> RoiGraph {
    let names: Vec<String> = (0..v).map(|i| format!("n{i}")).collect();
    let mut pairs: Vec<(usize, usize)> = (0..v).map(|i| (i, (i + 1) % v)).collect();
    while pairs.len() < v + chords {
        let (a, b) = (rng.gen_range(0..v), rng.gen_range(0..v));
        if a != b {
            pairs.push((a, b));
        }
    }
    RoiGraph::new(names, pairs).unwrap()
}
