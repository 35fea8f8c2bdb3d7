use dartsrenet::cells::{AlphaTable, CellKind, Genotype, Preset};
use dartsrenet::data::{make_batch, synthetic, Dataset, ImageShape, NormStats, Pipeline, SplitMode, SplitTag};
use dartsrenet::model::{Model, NetworkConfig};
use dartsrenet::renet::Variant;
use dartsrenet::search::{
    agreement, multi_seed_search, retrain, retrain_report_csv, run_search, search_report_csv, SearchState, StepKind,
    TrainSettings,
};
use dartsrenet::Error;

fn tiny(cell: CellKind) -> NetworkConfig {
    let mut c = NetworkConfig::with_sizes(cell, Variant::Vanilla, 3, 4, 8);
    c.input = (3, 8, 8);
    c
}

fn data(n: usize, seed: u64) -> Dataset {
    synthetic(n, ImageShape::new(3, 8, 8), SplitTag::Train, seed)
}

fn settings() -> TrainSettings {
    TrainSettings {
        batch_size: 8,
        eval_batch_size: 32,
        max_epochs: 3,
        patience: 5,
        augment: None,
        seed: 7,
        ..TrainSettings::default()
    }
}

type Batch = (dartsrenet::numerics::Tensor<f64>, Vec<usize>);

fn batches(d: &Dataset) -> (Batch, Batch) {
    let stats = NormStats::compute(d).unwrap();
    (
        make_batch(d, &[0, 1, 2, 3], &stats, Pipeline::Eval).unwrap(),
        make_batch(d, &[4, 5, 6, 7], &stats, Pipeline::Eval).unwrap(),
    )
}

#[test]
fn each_step_moves_only_its_own_group() {
    let d = data(8, 1);
    let ((xt, yt), (xv, yv)) = batches(&d);
    let model = Model::<f64>::build(tiny(CellKind::Mixed { num_vertices: 3 }), 2).unwrap();
    let mut state = SearchState::new(model, &settings()).unwrap();
    let alpha = state.model.alpha().unwrap();
    let weights = state.model.weight_params();
    let a0 = state.model.store().value(alpha).clone();
    let w0 = state.model.store().snapshot(&weights);
    state.search_step((&xt, &yt), (&xv, &yv)).unwrap();
    assert_ne!(state.model.store().value(alpha), &a0);
    assert!(weights
        .iter()
        .zip(&w0)
        .any(|(&id, w)| state.model.store().value(id) != w));
    assert!(state.weight_optimizer().moments(alpha).is_none());
    assert!(weights.iter().all(|&id| state.alpha_optimizer().moments(id).is_none()));
    assert_eq!(state.step_log(), &[StepKind::Architecture, StepKind::Weights]);
    assert_eq!(
        (state.alpha_optimizer().steps(), state.weight_optimizer().steps()),
        (1, 1)
    );
}

#[test]
fn zero_alpha_rate_keeps_alpha_bitwise() {
    let d = data(8, 1);
    let ((xt, yt), (xv, yv)) = batches(&d);
    let mut s = settings();
    s.alpha.learning_rate = 0.0;
    let model = Model::<f32>::build(tiny(CellKind::Mixed { num_vertices: 3 }), 2).unwrap();
    let mut state = SearchState::new(model, &s).unwrap();
    let alpha = state.model.alpha().unwrap();
    let before: Vec<u32> = state
        .model
        .store()
        .value(alpha)
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    let (xt, xv) = (xt.cast::<f32>(), xv.cast::<f32>());
    for _ in 0..10 {
        state.search_step((&xt, &yt), (&xv, &yv)).unwrap();
    }
    let after: Vec<u32> = state
        .model
        .store()
        .value(alpha)
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn search_requires_mixed_cells() {
    let model = Model::<f64>::build(tiny(CellKind::Gru), 0).unwrap();
    assert!(matches!(SearchState::new(model, &settings()), Err(Error::Config(_))));
    assert!(run_search::<f64>(
        &data(16, 0),
        tiny(CellKind::Gru),
        &settings(),
        SplitMode::SEARCH_DEFAULT
    )
    .is_err());
    assert!(run_search::<f64>(
        &data(1, 0),
        tiny(CellKind::Mixed { num_vertices: 2 }),
        &settings(),
        SplitMode::SEARCH_DEFAULT
    )
    .is_err());
}

#[test]
fn search_is_reproducible_and_reports_every_epoch() {
    let d = data(48, 3);
    let net = tiny(CellKind::Mixed { num_vertices: 3 });
    let a = run_search::<f64>(&d, net.clone(), &settings(), SplitMode::SEARCH_DEFAULT).unwrap();
    let b = run_search::<f64>(&d, net, &settings(), SplitMode::SEARCH_DEFAULT).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.alpha, b.alpha);
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.len(), 3);
    assert_eq!(a.genotype, a.alpha.derive_genotype());
    assert_eq!(a.state.step_log().len(), 2 * 3 * 3);
    for r in &a.report {
        assert!(r.alpha_entropy.is_finite() && r.alpha_entropy > 0.0);
        assert!(r.train_loss.is_finite() && r.val_loss.is_finite());
    }
    let csv = search_report_csv(&a.report);
    assert!(csv.starts_with("epoch,train_loss,val_loss,alpha_entropy\n1,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn zero_patience_stops_after_first_worse_epoch() {
    let d = data(48, 3);
    let mut s = settings();
    s.max_epochs = 20;
    s.patience = 0;
    s.weights.learning_rate = 0.5;
    let out = run_search::<f64>(
        &d,
        tiny(CellKind::Mixed { num_vertices: 2 }),
        &s,
        SplitMode::SEARCH_DEFAULT,
    )
    .unwrap();
    let r = &out.report;
    assert!(r.len() < 20);
    let last = r.len() - 1;
    let best_before = r[..last].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(r[last].val_loss >= best_before);
    for k in 1..last {
        let prior = r[..k].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(r[k].val_loss < prior);
    }
}

#[test]
fn saturated_alpha_has_near_zero_entropy() {
    let g = Preset::DirectionalWeightSharing.genotype();
    assert!(AlphaTable::saturated(&g, 40.0).entropy() < 1e-12);
}

#[test]
fn retrain_reports_and_restores_best_weights() {
    let d = data(60, 4);
    let test = synthetic(20, ImageShape::new(3, 8, 8), SplitTag::Test, 5);
    let net = tiny(CellKind::Genotype(Preset::DirectionalWeightSharing.genotype()));
    let out = retrain::<f64>(
        &d,
        Some(&test),
        net.clone(),
        &settings(),
        SplitMode::Retrain { fraction: 0.2 },
    )
    .unwrap();
    assert_eq!(out.report.len(), 3);
    let best = out.report.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    assert_eq!(out.best_val_acc, best);
    let acc = out.test_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(retrain_report_csv(&out.report).starts_with("epoch,train_loss,val_loss,val_acc\n"));

    let again = retrain::<f64>(
        &d,
        Some(&test),
        net.clone(),
        &settings(),
        SplitMode::Retrain { fraction: 0.2 },
    )
    .unwrap();
    assert_eq!(again.report, out.report);
    let other_seed = TrainSettings { seed: 8, ..settings() };
    let other = retrain::<f64>(&d, None, net.clone(), &other_seed, SplitMode::Retrain { fraction: 0.2 }).unwrap();
    let ids = other.model.weight_params();
    assert_ne!(other.model.store().snapshot(&ids), out.model.store().snapshot(&ids));
    assert!(retrain::<f64>(
        &d,
        None,
        tiny(CellKind::Mixed { num_vertices: 2 }),
        &settings(),
        SplitMode::RETRAIN_DEFAULT
    )
    .is_err());
}

#[test]
fn agreement_summaries() {
    let dws = Preset::DirectionalWeightSharing.genotype();
    let sw = Preset::SigmoidWeighting.genotype();
    let one = agreement(std::slice::from_ref(&dws)).unwrap();
    assert!(one.iter().all(|a| a.agreement == 1.0));
    let mixed = agreement(&[dws.clone(), sw.clone(), dws.clone()]).unwrap();
    assert_eq!(mixed.len(), 8);
    assert_eq!(mixed[0].modal, dws.entry(1));
    for a in &mixed {
        assert!(a.agreement == 1.0 || (a.agreement - 2.0 / 3.0).abs() < 1e-12);
    }
    assert!(agreement(&[]).is_err());
    let short: Genotype = "vertices=1\nv1 pred=0 act=Tanh\n".parse().unwrap();
    assert!(agreement(&[dws, short]).is_err());
}

#[test]
fn multi_seed_runs() {
    let d = data(32, 6);
    let net = tiny(CellKind::Mixed { num_vertices: 2 });
    let mut s = settings();
    s.max_epochs = 1;
    let same = multi_seed_search::<f64>(&d, &net, &s, SplitMode::SEARCH_DEFAULT, &[5, 5, 5]).unwrap();
    assert!(same.genotypes.windows(2).all(|w| w[0] == w[1]));
    assert!(same.agreement.iter().all(|a| a.agreement == 1.0));
    let distinct = multi_seed_search::<f64>(&d, &net, &s, SplitMode::SEARCH_DEFAULT, &[1, 2, 3]).unwrap();
    assert_eq!(distinct.genotypes.len(), 3);
    assert!(distinct.agreement.iter().all(|a| (0.0..=1.0).contains(&a.agreement)));
    assert!(multi_seed_search::<f64>(&d, &net, &s, SplitMode::SEARCH_DEFAULT, &[]).is_err());
}
