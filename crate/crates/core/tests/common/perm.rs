//! Node relabelling helpers for the permutation-equivariance checks.

use dagi::graph::RoiGraph;
use dagi::layers::{GcnLayer, GinLayer};
use dagi::math::{Matrix, Mode, ParamStore, Session};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const V: usize = 34;
pub const BATCH: usize = 3;

/// `perm[i]` is the new index of old node `i`.
pub fn relabel(graph: &RoiGraph, perm: &[usize]) -> RoiGraph {
    let mut names = vec![String::new(); perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        names[p] = graph.names()[i].clone();
    }
    RoiGraph::new(
        names,
        graph.edges().iter().map(|&(a, b)| (perm[a], perm[b])),
    )
    .unwrap()
}

/// Moves row `b*V + i` to `b*V + perm[i]` in every graph of the batch.
pub fn permute_batch(x: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for b in 0..BATCH {
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(b * V + p).copy_from_slice(x.row(b * V + i));
        }
    }
    out
}

pub fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

pub enum Layer {
    Gin(GinLayer),
    Gcn(GcnLayer),
}

pub fn apply(
    layer: &Layer,
    store: &ParamStore,
    mode: Mode,
    graph: &RoiGraph,
    x: &Matrix,
) -> Matrix {
    let mut sess = Session::frozen(store, mode);
    let xv = sess.tape.constant(x.clone());
    let out = match layer {
        Layer::Gin(l) => l.forward(&mut sess, xv, graph.edge_list(), None, BATCH * V),
        Layer::Gcn(l) => l.forward(&mut sess, xv, &graph.gcn_operator(), BATCH * V),
    }
    .unwrap();
    sess.tape.value(out).clone()
}

/// Largest `|layer(P h, P A P^T) - P layer(h, A)|` over 10 permutations of
/// the Desikan-Killiany graph and of a random 34-node graph, in both modes.
pub fn worst_gap(build: impl Fn(&mut ParamStore, &mut ChaCha8Rng) -> Layer) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let graphs = [
        RoiGraph::default_desikan_killiany(),
        super::random_graph(&mut rng, V, 40),
    ];
    let mut store = ParamStore::new();
    let layer = build(&mut store, &mut rng);
    let mut worst: f64 = 0.0;
    for graph in &graphs {
        assert_eq!(graph.node_count(), V);
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..V).collect();
            perm.shuffle(&mut rng);
            let moved = relabel(graph, &perm);
            let x = super::normal_matrix(&mut rng, BATCH * V, 3);
            for mode in [Mode::Train, Mode::Eval] {
                let plain = apply(&layer, &store, mode, graph, &x);
                let relabelled = apply(&layer, &store, mode, &moved, &permute_batch(&x, &perm));
                worst = worst.max(max_diff(&relabelled, &permute_batch(&plain, &perm)));
            }
        }
    }
    worst
}

pub fn gin(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layer {
    let l = GinLayer::new(store, rng, "gin", &[3, 16, 8], true);
    *store.get_mut(l.eps) = Matrix::scalar(0.3);
    Layer::Gin(l)
}

pub fn gcn(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Gcn(GcnLayer::new(store, rng, "gcn", 3, 8, true))
}
