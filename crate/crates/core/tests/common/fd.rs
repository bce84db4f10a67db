//! Central finite differences against the tape's reverse pass. Inputs
//! enter as trainable parameters so a single checker covers inputs and
//! weights alike.

use std::time::Instant;

use dagi::layers::{global_mean_pool, BatchNorm, DenseLayer, GcnLayer, GinLayer, Mlp};
use dagi::math::{Matrix, Mode, ParamStore, Session, Var};
use dagi::model::{classifier_loss, imputation_loss};
use dagi::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL: f64 = 1e-5;
const ABS: f64 = 1e-7;
pub const SEEDS: u64 = 20;

type Loss<'a> = dyn Fn(&mut Session<'_>) -> Result<Var> + 'a;

/// Returns the number of coordinates checked and skipped.
///
/// A mismatching coordinate whose estimate also moves when the step drops
/// to `H / 10` has a ReLU kink within `H`, where no derivative exists. Such
/// coordinates are skipped; [`run`] bounds how many.
fn check(
    label: &str,
    seed: u64,
    store: &mut ParamStore,
    mode: Mode,
    f: &Loss<'_>,
) -> (usize, usize) {
    let analytic = {
        let mut sess = Session::new(store, mode);
        let loss = f(&mut sess).unwrap();
        let grads = sess.tape.backward(loss).unwrap();
        sess.param_grads(&grads)
    };
    assert!(!analytic.is_empty(), "{label}: no parameters reached");
    let eval = |store: &ParamStore| {
        let mut sess = Session::new(store, mode);
        let loss = f(&mut sess).unwrap();
        sess.tape.scalar_value(loss)
    };
    let (mut checked, mut kinks) = (0, 0);
    for (id, grad) in analytic {
        for k in 0..grad.len() {
            let orig = store.get(id).as_slice()[k];
            store.get_mut(id).as_mut_slice()[k] = orig + H;
            let up = eval(store);
            store.get_mut(id).as_mut_slice()[k] = orig - H;
            let down = eval(store);
            store.get_mut(id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = grad.as_slice()[k];
            let err = (a - numeric).abs();
            let ok = |err: f64| err <= ABS || err <= REL * a.abs().max(numeric.abs());
            if !ok(err) {
                // On a smooth stretch the estimate barely moves when the step
                // shrinks; across a kink it jumps.
                let small = H / 10.0;
                store.get_mut(id).as_mut_slice()[k] = orig + small;
                let up_s = eval(store);
                store.get_mut(id).as_mut_slice()[k] = orig - small;
                let down_s = eval(store);
                store.get_mut(id).as_mut_slice()[k] = orig;
                if !ok(((up_s - down_s) / (2.0 * small) - numeric).abs()) {
                    kinks += 1;
                    continue;
                }
            }
            assert!(
                ok(err),
                "{label} seed {seed}: {}[{k}] analytic {a:e} numeric {numeric:e}",
                store.entry(id).name
            );
            checked += 1;
        }
    }
    (checked, kinks)
}

/// Values bounded away from zero so ReLU kinks stay out of reach of `H`.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * r)` with a fixed random `r`, so every output entry matters.
fn project(sess: &mut Session<'_>, out: Var, r: &Matrix) -> Result<Var> {
    let r = sess.tape.constant(r.clone());
    let prod = sess.tape.mul(out, r)?;
    sess.tape.sum(prod)
}

/// Coordinates checked and kinks skipped for one case over every seed.
pub fn run(label: &str, case: fn(u64) -> (usize, usize)) -> (usize, usize) {
    let start = Instant::now();
    let (checked, kinks) = (1..=SEEDS)
        .map(case)
        .fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    eprintln!(
        "{label}: {checked} coordinates, {kinks} at kinks, over {SEEDS} seeds in {:.2?}",
        start.elapsed()
    );
    (checked, kinks)
}

/// At most 1% of coordinates over all seeds may sit on a kink.
pub fn within_kink_budget(checked: usize, kinks: usize) -> bool {
    kinks * 100 <= checked + kinks
}

pub fn dense(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (
        rng.gen_range(1..6),
        rng.gen_range(1..6),
        rng.gen_range(1..6),
    );
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, n, i), true);
    let layer = DenseLayer::new(&mut store, &mut rng, "dense", i, o);
    let r = super::normal_matrix(&mut rng, n, o);
    check("dense", seed, &mut store, Mode::Train, &|s| {
        let xv = s.param(x);
        let out = layer.forward(s, xv)?;
        project(s, out, &r)
    })
}

pub fn relu(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", away_from_zero(&mut rng, 4, 3), true);
    let r = super::normal_matrix(&mut rng, 4, 3);
    check("relu", seed, &mut store, Mode::Train, &|s| {
        let xv = s.param(x);
        let out = s.tape.relu(xv);
        project(s, out, &r)
    })
}

pub fn sigmoid(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, 4, 3).scale(3.0), true);
    let r = super::normal_matrix(&mut rng, 4, 3);
    check("sigmoid", seed, &mut store, Mode::Train, &|s| {
        let xv = s.param(x);
        let out = s.tape.sigmoid(xv);
        project(s, out, &r)
    })
}

pub fn primitives(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let (g, b, c) = (3, 2, 4);
    let mut store = ParamStore::new();
    let a = store.add("a", super::normal_matrix(&mut rng, g * b, c), true);
    let w = store.add("w", super::normal_matrix(&mut rng, c, c), true);
    let pos = store.add(
        "pos",
        Matrix::from_fn(g * b, c, |_, _| rng.gen_range(0.5..2.0)),
        true,
    );
    let f = store.add("f", super::normal_matrix(&mut rng, b, 1), true);
    let r = super::normal_matrix(&mut rng, g * b, c);
    check("primitives", seed, &mut store, Mode::Train, &|s| {
        let (a, w, pos, f) = (s.param(a), s.param(w), s.param(pos), s.param(f));
        let aw = s.tape.matmul(a, w)?;
        let lg = s.tape.log(pos);
        let sq = s.tape.square(a);
        let t = s.tape.add(aw, lg)?;
        let t = s.tape.sub(t, sq)?;
        let t = s.tape.scale_groups(t, f, g)?;
        let gm = s.tape.group_mean(t, g)?;
        let gb = s.tape.group_broadcast(gm, g);
        let t = s.tape.mul(t, gb)?;
        let mr = s.tape.mean_rows(t)?;
        let t = s.tape.add_row(t, mr)?;
        let t = s.tape.offset(t, 0.3);
        let main = project(s, t, &r)?;
        let extra = s.tape.mean_all(sq)?;
        s.tape.add(main, extra)
    })
}

pub fn bn_case(seed: u64, mode: Mode) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let (group, groups, c) = (
        rng.gen_range(3..6),
        rng.gen_range(1..3),
        rng.gen_range(1..4),
    );
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, group * groups, c), true);
    let bn = BatchNorm::new(&mut store, "bn", c);
    *store.get_mut(bn.gamma) = Matrix::from_fn(1, c, |_, _| rng.gen_range(0.5..1.5));
    *store.get_mut(bn.beta) = super::normal_matrix(&mut rng, 1, c);
    *store.get_mut(bn.running_mean) = super::normal_matrix(&mut rng, 1, c);
    *store.get_mut(bn.running_var) = Matrix::from_fn(1, c, |_, _| rng.gen_range(0.5..2.0));
    let r = super::normal_matrix(&mut rng, group * groups, c);
    check("batch norm", seed, &mut store, mode, &|s| {
        let xv = s.param(x);
        let out = bn.forward(s, xv, group)?;
        project(s, out, &r)
    })
}

pub fn batch_norm_train(seed: u64) -> (usize, usize) {
    bn_case(seed, Mode::Train)
}

pub fn batch_norm_eval(seed: u64) -> (usize, usize) {
    bn_case(seed, Mode::Eval)
}

pub fn gin(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let v = rng.gen_range(6..10);
    let graph = super::random_graph(&mut rng, v, 3);
    let edges = graph.edge_list().clone();
    let (b, p) = (3, 3);
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, b * v, p), true);
    let mask = store.add(
        "mask",
        Matrix::from_fn(1, graph.edges().len(), |_, _| rng.gen_range(0.1..1.0)),
        true,
    );
    let layer = GinLayer::new(&mut store, &mut rng, "gin", &[p, 5, 4], true);
    *store.get_mut(layer.eps) = Matrix::scalar(rng.gen_range(-0.5..0.5));
    let r = super::normal_matrix(&mut rng, b * v, 4);
    check("gin", seed, &mut store, Mode::Train, &|s| {
        let (xv, m) = (s.param(x), s.param(mask));
        let out = layer.forward(s, xv, &edges, Some(m), b * v)?;
        project(s, out, &r)
    })
}

pub fn gcn(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let v = rng.gen_range(6..10);
    let graph = super::random_graph(&mut rng, v, 3);
    let op = graph.gcn_operator();
    let (b, p) = (3, 3);
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, b * v, p), true);
    let layer = GcnLayer::new(&mut store, &mut rng, "gcn", p, 4, true);
    let r = super::normal_matrix(&mut rng, b * v, 4);
    check("gcn", seed, &mut store, Mode::Train, &|s| {
        let xv = s.param(x);
        let out = layer.forward(s, xv, &op, b * v)?;
        project(s, out, &r)
    })
}

pub fn pool(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let (v, b, c) = (
        rng.gen_range(2..7),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
    );
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, b * v, c), true);
    let r = super::normal_matrix(&mut rng, b, c);
    check("pool", seed, &mut store, Mode::Train, &|s| {
        let xv = s.param(x);
        let out = global_mean_pool(s, xv, v)?;
        project(s, out, &r)
    })
}

pub fn imputation_loss_case(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let (b, v, q) = (rng.gen_range(1..4), 5, 2);
    let mut store = ParamStore::new();
    let pred = store.add("pred", super::normal_matrix(&mut rng, b * v, q), true);
    let truth = super::normal_matrix(&mut rng, b * v, q);
    check("imputation loss", seed, &mut store, Mode::Train, &|s| {
        let pv = s.param(pred);
        let t = s.tape.constant(truth.clone());
        imputation_loss(&mut s.tape, pv, t, b)
    })
}

pub fn classifier_loss_case(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
    let b = rng.gen_range(1..6);
    let labels: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2)).collect();
    let mut store = ParamStore::new();
    let prob = store.add(
        "prob",
        Matrix::from_fn(b, 1, |_, _| rng.gen_range(0.05..0.95)),
        true,
    );
    check("classifier loss", seed, &mut store, Mode::Train, &|s| {
        let pv = s.param(prob);
        classifier_loss(&mut s.tape, pv, &labels)
    })
}

/// The whole joint objective: GIN encoder, GIN decoder, pooled classifier,
/// both losses, in train mode.
pub fn joint(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let v = 8;
    let graph = super::random_graph(&mut rng, v, 3);
    let edges = graph.edge_list().clone();
    let (b, p, q, r) = (4, 2, 2, 4);
    let mut store = ParamStore::new();
    let x = store.add("x", super::normal_matrix(&mut rng, b * v, p), true);
    let enc0 = GinLayer::new(&mut store, &mut rng, "enc0", &[p, r, r], true);
    let enc1 = GinLayer::new(&mut store, &mut rng, "enc1", &[r, r, r], true);
    let dec = GinLayer::new(&mut store, &mut rng, "dec", &[r, r, q], false);
    let cls = Mlp::new(&mut store, &mut rng, "cls", &[r, 3, 1]);
    let truth = super::normal_matrix(&mut rng, b * v, q);
    let labels: Vec<u8> = (0..b as u8).map(|i| i % 2).collect();
    check("joint", seed, &mut store, Mode::Train, &|s| {
        let xv = s.param(x);
        let h = enc0.forward(s, xv, &edges, None, b * v)?;
        let h = enc1.forward(s, h, &edges, None, b * v)?;
        let y = dec.forward(s, h, &edges, None, b * v)?;
        let pooled = global_mean_pool(s, h, v)?;
        let logit = cls.forward(s, pooled)?;
        let prob = s.tape.sigmoid(logit);
        let t = s.tape.constant(truth.clone());
        let imp = imputation_loss(&mut s.tape, y, t, b)?;
        let bce = classifier_loss(&mut s.tape, prob, &labels)?;
        s.tape.add(imp, bce)
    })
}

/// Every case with its label.
pub const CASES: &[(&str, fn(u64) -> (usize, usize))] = &[
    ("dense", dense),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("primitives", primitives),
    ("batch norm train", batch_norm_train),
    ("batch norm eval", batch_norm_eval),
    ("gin", gin),
    ("gcn", gcn),
    ("pool", pool),
    ("imputation loss", imputation_loss_case),
    ("classifier loss", classifier_loss_case),
    ("joint", joint),
];
