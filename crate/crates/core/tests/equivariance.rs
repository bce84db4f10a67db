//! Relabelling the nodes of a graph relabels a graph layer's output the
//! same way: `layer(P h, P A P^T) = P layer(h, A)`.

mod common;

use common::perm::{self, apply, max_diff, permute_batch, relabel, Layer, BATCH, V};
use dagi::graph::RoiGraph;
use dagi::layers::GinLayer;
use dagi::math::{Mode, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

#[test]
fn gin_layer_is_permutation_equivariant() {
    let worst = perm::worst_gap(perm::gin);
    assert!(worst <= TOL, "gin: max difference {worst:e}");
}

#[test]
fn gcn_layer_is_permutation_equivariant() {
    let worst = perm::worst_gap(perm::gcn);
    assert!(worst <= TOL, "gcn: max difference {worst:e}");
}

#[test]
fn relabelling_changes_the_unpermuted_output() {
    // Guards against a vacuous pass: without permuting the output back, a
    // relabelled graph gives a different answer.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let graph = RoiGraph::default_desikan_killiany();
    let mut store = ParamStore::new();
    let layer = Layer::Gin(GinLayer::new(
        &mut store,
        &mut rng,
        "gin",
        &[3, 8, 8],
        false,
    ));
    let mut perm: Vec<usize> = (0..V).collect();
    perm.shuffle(&mut rng);
    let x = common::normal_matrix(&mut rng, BATCH * V, 3);
    let plain = apply(&layer, &store, Mode::Eval, &graph, &x);
    let relabelled = apply(
        &layer,
        &store,
        Mode::Eval,
        &relabel(&graph, &perm),
        &permute_batch(&x, &perm),
    );
    assert!(max_diff(&relabelled, &plain) > 1e-3);
}
