use dagi::datagen::{generate, SynthConfig, Synthetic};
use dagi::graph::RoiGraph;
use dagi::model::checkpoint::Container;
use dagi::model::{train, DagiModel, TrainConfig};
use dagi::Error;

fn small(seed: u64) -> (Synthetic, RoiGraph) {
    let graph = RoiGraph::default_desikan_killiany();
    let cfg = SynthConfig {
        n_source: 64,
        n_target: 16,
        seed,
        ..Default::default()
    };
    (generate(&cfg, &graph).unwrap(), graph)
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let (syn, graph) = small(1);
    let (a, log_a) = train(&syn.source, &graph, &quick(7)).unwrap();
    let (b, log_b) = train(&syn.source, &graph, &quick(7)).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(
        a.to_container().unwrap().to_bytes().unwrap(),
        b.to_container().unwrap().to_bytes().unwrap()
    );
    let (c, _) = train(&syn.source, &graph, &quick(8)).unwrap();
    assert_ne!(
        a.to_container().unwrap().to_bytes().unwrap(),
        c.to_container().unwrap().to_bytes().unwrap()
    );
}

#[test]
fn checkpoint_round_trip_gives_identical_outputs() {
    let (syn, graph) = small(2);
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        quick(3),
        TrainConfig {
            epochs: 4,
            ..TrainConfig::gi()
        },
        TrainConfig {
            epochs: 4,
            ..TrainConfig::gcn()
        },
    ] {
        let (model, _) = train(&syn.source, &graph, &cfg).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = DagiModel::load(&path).unwrap();
        for s in &syn.target.subjects {
            let (x, y) = (
                model.forward(&s.shared).unwrap(),
                back.forward(&s.shared).unwrap(),
            );
            let bits = |m: &dagi::math::Matrix| {
                m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(&x.imputed), bits(&y.imputed));
            assert_eq!(bits(&x.embeddings), bits(&y.embeddings));
            assert_eq!(x.sex_prob.map(f64::to_bits), y.sex_prob.map(f64::to_bits));
        }
        assert_eq!(
            back.to_container().unwrap().to_bytes().unwrap(),
            std::fs::read(&path).unwrap()
        );
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (syn, graph) = small(3);
    let (model, _) = train(&syn.source, &graph, &quick(1)).unwrap();
    let bytes = model.to_container().unwrap().to_bytes().unwrap();

    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(
        matches!(Container::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum"))
    );

    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(
        Container::from_bytes(&version),
        Err(Error::CheckpointVersion {
            found: 9,
            expected: 1
        })
    ));

    assert!(matches!(
        Container::from_bytes(&bytes[..bytes.len() - 8]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Container::from_bytes(b"PK\x03\x04"),
        Err(Error::Checkpoint(_))
    ));

    let linear =
        dagi::baselines::fit_linear(&syn.source, dagi::baselines::LinearScope::PerRoi).unwrap();
    let c = linear.to_container().unwrap();
    assert!(matches!(
        DagiModel::from_container(&c),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn batching_does_not_change_eval_outputs() {
    let (syn, graph) = small(4);
    let (model, _) = train(&syn.source, &graph, &quick(2)).unwrap();
    let xs: Vec<&dagi::math::Matrix> = syn.target.subjects.iter().map(|s| &s.shared).collect();
    let batch = model.forward_batch(&xs).unwrap();
    for (x, out) in xs.iter().zip(&batch) {
        let one = model.forward(x).unwrap();
        assert!(one.imputed.sub(&out.imputed).unwrap().max_abs() < 1e-12);
        assert!((one.sex_prob.unwrap() - out.sex_prob.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn gi_and_dagi_share_initial_weights() {
    let (syn, graph) = small(5);
    let dagi = DagiModel::new(
        &syn.source.schema,
        &graph,
        &TrainConfig {
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let gi = DagiModel::new(
        &syn.source.schema,
        &graph,
        &TrainConfig {
            seed: 4,
            ..TrainConfig::gi()
        },
    )
    .unwrap();
    for (a, b) in dagi.store().entries().iter().zip(gi.store().entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn untrained_models_and_bad_inputs_are_refused() {
    let (syn, graph) = small(6);
    let (model, log) = train(
        &syn.source,
        &graph,
        &TrainConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!model.is_trained());
    assert!(log.epochs.is_empty());
    assert!(
        train(&syn.target, &graph, &quick(1)).is_err(),
        "target cohort has no target block"
    );
    let wrong = dagi::math::Matrix::zeros(34, 2);
    assert!(matches!(model.forward(&wrong), Err(Error::Schema(_))));
    let bad = TrainConfig {
        learning_rate: -1.0,
        ..Default::default()
    };
    assert!(matches!(
        train(&syn.source, &graph, &bad),
        Err(Error::Config(_))
    ));
}

#[test]
fn train_log_csv_lists_every_epoch() {
    let (syn, graph) = small(7);
    let (_, log) = train(&syn.source, &graph, &quick(1)).unwrap();
    let text = String::from_utf8(log.to_csv_bytes().unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,L_imp,L_cls,L_total");
    assert_eq!(lines.len(), 5);
    for e in &log.epochs {
        let cls = e.classification.unwrap();
        assert!((e.total - (e.imputation + cls)).abs() <= 1e-9 * e.total.abs());
    }
}
