use dartsrenet::cells::{CellKind, Preset};
use dartsrenet::model::{argmax_rows, grid_schedule, Accuracy, Model, NetworkConfig};
use dartsrenet::numerics::gradcheck::{check_params, GradCheckConfig};
use dartsrenet::numerics::{Init, ParamGroup, Tape, Tensor};
use dartsrenet::renet::Variant;
use dartsrenet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(cell: CellKind, variant: Variant) -> NetworkConfig {
    let mut c = NetworkConfig::with_sizes(cell, variant, 4, 5, 8);
    c.input = (3, 8, 8);
    c
}

fn images(n: usize, config: &NetworkConfig, seed: u64) -> Tensor<f64> {
    let (c, h, w) = config.input;
    Tensor::uniform(&[n, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dws() -> CellKind {
    CellKind::Genotype(Preset::DirectionalWeightSharing.genotype())
}

#[test]
fn default_network_shapes() {
    let config = NetworkConfig::new(CellKind::Gru, Variant::Vanilla);
    assert_eq!(grid_schedule(&config), vec![(16, 16), (8, 8), (4, 4)]);
    let model = Model::<f32>::build(config.clone(), 0).unwrap();
    let x = images(2, &config, 1).cast::<f32>();
    let mut tape = Tape::new();
    let bind = tape.bind_params(model.store(), |_| false);
    let v = tape.constant(x);
    let mut seen = Vec::new();
    let logits = model
        .network()
        .forward_traced(&mut tape, &bind, v, |k, s| seen.push((k, s.to_vec())))
        .unwrap();
    assert_eq!(tape.shape(logits), &[2, 10]);
    assert_eq!(
        seen,
        vec![
            (1, vec![2, 512, 16, 16]),
            (2, vec![2, 512, 8, 8]),
            (3, vec![2, 512, 4, 4])
        ]
    );
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let config = small(CellKind::Gru, Variant::Vanilla);
    let model = Model::<f64>::build(config.clone(), 0).unwrap();
    let wrong = Tensor::<f64>::zeros(&[1, 3, 9, 8]);
    assert!(matches!(model.classify(&wrong), Err(Error::Shape { .. })));

    let mut bad = config.clone();
    bad.num_classes = 1;
    assert!(matches!(Model::<f64>::build(bad, 0), Err(Error::Config(_))));
    let mut bad = config.clone();
    bad.renet.pop();
    assert!(Model::<f64>::build(bad, 0).is_err());
    let mut bad = config;
    bad.renet[1].cell = CellKind::Mixed { num_vertices: 3 };
    assert!(Model::<f64>::build(bad, 0).is_err());
}

#[test]
fn parameter_ordering_of_default_networks() {
    let count = |cell: CellKind, variant: Variant| {
        let config = NetworkConfig::new(cell, variant);
        Model::<f32>::build(config, 0).unwrap().count_parameters()
    };
    let vanilla = count(CellKind::Genotype(Preset::Vanilla.genotype()), Variant::Vanilla);
    let shared = count(dws(), Variant::DirectionalWeightSharing);
    let gru = count(CellKind::Gru, Variant::Vanilla);
    let lstm = count(CellKind::Lstm, Variant::Vanilla);
    assert!(shared.rnn() < gru.rnn() && gru.rnn() < lstm.rnn() && lstm.rnn() < vanilla.rnn());
    let dag_unshared = count(dws(), Variant::Vanilla);
    assert_eq!(2 * shared.rnn(), dag_unshared.rnn());
    assert_eq!(shared.stem, gru.stem);
    assert_eq!(shared.head, gru.head);
    assert_eq!(shared.head, 8192 * 1024 + 1024 + 1024 * 10 + 10);
    assert_eq!(shared.stem, (3 * 9 * 64 + 64) + 2 * (64 * 9 * 64 + 64));
    assert_eq!(lstm.renet.len(), 3);
}

#[test]
fn sigmoid_weighting_adds_one_scalar_per_site() {
    let g = CellKind::Genotype(Preset::SigmoidWeighting.genotype());
    let sw = Model::<f32>::build(NetworkConfig::new(g.clone(), Variant::SigmoidWeighting), 0).unwrap();
    let plain = Model::<f32>::build(NetworkConfig::new(g, Variant::Vanilla), 0).unwrap();
    let (a, b) = (sw.count_parameters(), plain.count_parameters());
    assert_eq!(a.sigmoid_weights, 16 * 16 + 8 * 8 + 4 * 4);
    assert_eq!(a.total() - b.total(), a.sigmoid_weights);
    assert_eq!(b.sigmoid_weights, 0);
}

#[test]
fn search_network_has_one_alpha() {
    let model = Model::<f64>::build(small(CellKind::Mixed { num_vertices: 8 }, Variant::Vanilla), 3).unwrap();
    let id = model.alpha().unwrap();
    assert_eq!(model.architecture_params(), vec![id]);
    assert_eq!(model.store().value(id).shape(), &[36, 4]);
    assert_eq!(model.store().name(id), "alpha");
    assert!(model.store().value(id).data().iter().all(|v| v.abs() <= 1e-3));
    assert_eq!(model.count_parameters().alpha, 144);
    let weights = model.weight_params();
    assert!(!weights.contains(&id));
    assert_eq!(weights.len() + 1, model.store().len());
    assert_eq!(model.store().ids_in_group(ParamGroup::Architecture).len(), 1);
}

#[test]
fn untrained_loss_is_near_uniform() {
    for init in Init::ALL {
        let config = NetworkConfig::new(dws(), Variant::DirectionalWeightSharing).with_init(init);
        let losses: Vec<f64> = (0..5)
            .map(|seed| {
                let model = Model::<f32>::build(config.clone(), seed).unwrap();
                let x = images(2, &config, seed + 100).cast::<f32>();
                let mut tape = Tape::new();
                let bind = tape.bind_params(model.store(), |_| false);
                let v = tape.constant(x);
                let loss = model.loss(&mut tape, &bind, v, &[3, 7]).unwrap();
                tape.value(loss).item() as f64
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((mean - 10f64.ln()).abs() < 0.3, "{init}: losses {losses:?}");
        assert!(
            losses.iter().all(|l| (l - 10f64.ln()).abs() < 0.6),
            "{init}: losses {losses:?}"
        );
    }
}

#[test]
fn builds_are_deterministic_per_seed() {
    let config = small(CellKind::Lstm, Variant::Vanilla);
    let x = images(2, &config, 9);
    let a = Model::<f64>::build(config.clone(), 11).unwrap().classify(&x).unwrap();
    let b = Model::<f64>::build(config.clone(), 11).unwrap().classify(&x).unwrap();
    let c = Model::<f64>::build(config, 12).unwrap().classify(&x).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let config = small(dws(), Variant::SigmoidWeighting);
    let x = images(3, &config, 2).cast::<f32>();
    let model = Model::<f32>::build(config.clone(), 1).unwrap();
    model.save(&path).unwrap();
    let mut other = Model::<f32>::build(config.clone(), 2).unwrap();
    assert_ne!(model.classify(&x).unwrap().data(), other.classify(&x).unwrap().data());
    other.load(&path).unwrap();
    let a: Vec<u32> = model.classify(&x).unwrap().data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = other.classify(&x).unwrap().data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);

    let mut gru = Model::<f32>::build(small(CellKind::Gru, Variant::Vanilla), 0).unwrap();
    assert!(gru.load(&path).is_err());
    assert!(matches!(
        other.load(&dir.path().join("absent")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn accuracy_breaks_ties_to_lowest_index() {
    let logits = Tensor::<f64>::from_f64(&[3, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, -1.0, -3.0, -0.5]).unwrap();
    assert_eq!(argmax_rows(&logits).unwrap(), vec![0, 1, 2]);
    let mut acc = Accuracy::default();
    assert!(matches!(acc.value(), Err(Error::Data(_))));
    acc.add(&logits, &[0, 2, 2]).unwrap();
    assert_eq!(acc.value().unwrap(), 2.0 / 3.0);
    assert!(acc.add(&logits, &[0]).is_err());
}

#[test]
fn evaluate_matches_manual_count() {
    let config = small(CellKind::Gru, Variant::Vanilla);
    let model = Model::<f64>::build(config.clone(), 4).unwrap();
    let x = images(4, &config, 8);
    let predicted = argmax_rows(&model.classify(&x).unwrap()).unwrap();
    let labels = vec![predicted[0], (predicted[1] + 1) % 10, predicted[2], predicted[3]];
    let acc = model.evaluate(vec![Ok((x, labels))]).unwrap();
    assert_eq!(acc, 0.75);
    assert!(model.evaluate(Vec::new()).is_err());
}

#[test]
fn small_network_gradients_match_finite_differences() {
    for (cell, variant) in [
        (CellKind::Mixed { num_vertices: 3 }, Variant::Vanilla),
        (dws(), Variant::SigmoidWeighting),
    ] {
        let config = small(cell, variant);
        let mut model = Model::<f64>::build(config.clone(), 7).unwrap();
        let x = images(2, &config, 3);
        let (net, store) = model.parts_mut();
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(
            store,
            &ids,
            |t, b| {
                let v = t.constant(x.clone());
                net.loss(t, b, v, &[1, 4])
            },
            GradCheckConfig {
                probes: 30,
                ..GradCheckConfig::f64_default()
            },
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel error {}", report.max_rel_error());
    }
}
