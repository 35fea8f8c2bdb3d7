use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numerics::gradcheck::{check_params, GradCheckConfig};
use crate::numerics::{Init, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::reference;
use Activation::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Fixture {
    store: ParamStore<f64>,
    cell: Cell,
    alpha: Option<ParamId>,
}

fn fixture(kind: CellKind, input: usize, hidden: usize, seed: u64) -> Fixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let alpha = kind
        .num_vertices()
        .filter(|_| matches!(kind, CellKind::Mixed { .. }))
        .map(|n| {
            store.add(
                "alpha",
                AlphaTable::uniform(n, 1.0, &mut r).to_tensor(),
                ParamGroup::Architecture,
            )
        });
    let cell = Cell::register(&mut store, "cell", CellSpec::new(kind, input, hidden), &mut r).unwrap();
    // non-zero biases so the oracle comparison exercises them
    for id in cell.params().ids() {
        if store.value(id).rank() == 1 {
            *store.value_mut(id) = Tensor::uniform(store.value(id).shape(), 0.5, &mut r);
        }
    }
    Fixture { store, cell, alpha }
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (_, c) = t.dims2().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// Runs `steps` steps over random inputs; returns per-step tape outputs and
/// inputs, plus the final per-vertex states.
fn run(fx: &Fixture, batch: usize, steps: usize, seed: u64) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| false);
    let mix = match (fx.alpha, fx.cell.spec().kind.num_vertices()) {
        (Some(a), Some(n)) => Some(MixWeights::new(&mut tape, bind[a], n).unwrap()),
        _ => None,
    };
    let mut r = rng(seed);
    let mut state = fx.cell.zero_state(&mut tape, batch);
    let mut xs = Vec::new();
    let mut outs = Vec::new();
    for _ in 0..steps {
        let x = Tensor::uniform(&[batch, fx.cell.input_dim()], 2.0, &mut r);
        let xv = tape.constant(x.clone());
        state = fx.cell.step(&mut tape, &bind, mix.as_ref(), xv, &state).unwrap();
        xs.push(x);
        outs.push(tape.value(state.output).clone());
    }
    (xs, outs)
}

#[test]
fn genotype_text_round_trip() {
    for p in Preset::ALL {
        let g = p.genotype();
        let text = g.to_string();
        assert!(text.starts_with("vertices=8\nv1 pred=0 act="));
        assert_eq!(text.parse::<Genotype>().unwrap(), g);
    }
    let commented = "# comment\n\nvertices=1\n  v1 pred=0 act=relu\n";
    assert_eq!(
        commented.parse::<Genotype>().unwrap().entry(1),
        GenotypeEntry::new(0, ReLU)
    );
}

#[test]
fn genotype_text_rejects_malformed_input() {
    for bad in [
        "",
        "vertices=2\nv1 pred=0 act=ReLU\n",
        "vertices=1\nv1 pred=1 act=ReLU\n",
        "vertices=1\nv2 pred=0 act=ReLU\n",
        "vertices=1\nv1 pred=0 act=Swish\n",
        "vertices=1\nv1 pred=0 act=ReLU extra\n",
        "vertices=x\n",
        "vertices=0\n",
    ] {
        assert!(
            matches!(bad.parse::<Genotype>(), Err(Error::InvalidGenotype(_))),
            "{bad:?}"
        );
    }
}

#[test]
fn presets_are_valid_eight_vertex_cells() {
    for p in Preset::ALL {
        let g = p.genotype();
        assert_eq!(g.num_vertices(), 8);
        assert!(Genotype::new(g.entries().to_vec()).is_ok());
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert_eq!(Preset::DirectionalWeightSharing.genotype().count(Identity), 0);
    assert_eq!(Preset::DirectionalWeightSharing.genotype().count(ReLU), 6);
    assert_eq!(Preset::Vanilla.genotype().count(Tanh), 0);
    assert_eq!(Preset::Vanilla.genotype().count(Identity), 2);
    let sw = Preset::SigmoidWeighting.genotype();
    assert_eq!((5..=8).filter(|&i| sw.entry(i).pred == 4).count(), 4);
}

#[test]
fn dot_export_lists_input_and_labelled_edges() {
    let dot = Preset::DirectionalWeightSharing.genotype().to_dot();
    assert!(dot.contains("v0 [label=\"x_t,h_{t-1}\""));
    let vertices = dot
        .lines()
        .filter(|l| l.trim_start().starts_with('v') && !l.contains("->"))
        .count();
    assert_eq!(vertices, 9);
    let labels: Vec<&str> = dot
        .lines()
        .filter(|l| l.contains("->"))
        .map(|l| l.split("label=\"").nth(1).unwrap().trim_end_matches("\"];"))
        .collect();
    assert_eq!(
        labels,
        ["ReLU", "Sigmoid", "ReLU", "ReLU", "ReLU", "ReLU", "ReLU", "Sigmoid"]
    );
}

#[test]
fn vertex_step_gate_limits() {
    let h = 3;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::uniform(&[2, 4], 1.0, &mut rng(1)));
    let prev = tape.constant(Tensor::uniform(&[2, h], 1.0, &mut rng(2)));
    let w = tape.constant(Tensor::zeros(&[4, 2 * h]));
    for (gate_bias, expect_prev) in [(-50.0, true), (50.0, false)] {
        let mut b = Tensor::zeros(&[2 * h]);
        for k in 0..h {
            b.data_mut()[k] = gate_bias;
            b.data_mut()[h + k] = 0.3;
        }
        let b = tape.constant(b);
        let out = vertex_step(&mut tape, x, prev, w, b, Tanh).unwrap();
        let target = if expect_prev {
            tape.value(prev).clone()
        } else {
            tape.value(out.candidate).clone()
        };
        assert!(tape.value(out.state).max_abs_diff(&target) < 1e-12);
        assert!(tape.value(out.gate).data().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }
}

#[test]
fn sigmoid_vertex_from_zero_state_stays_in_unit_interval() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::uniform(&[5, 6], 10.0, &mut rng(3)));
    let prev = tape.constant(Tensor::zeros(&[5, 4]));
    let w = tape.constant(Tensor::uniform(&[6, 8], 3.0, &mut rng(4)));
    let b = tape.constant(Tensor::zeros(&[8]));
    let out = vertex_step(&mut tape, x, prev, w, b, Sigmoid).unwrap();
    assert!(tape.value(out.state).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn zero_weights_give_half_gated_activation_at_zero() {
    let g = Preset::DirectionalWeightSharing.genotype();
    let mut fx = fixture(CellKind::Genotype(g.clone()), 3, 2, 5);
    for id in fx.cell.params().ids() {
        let shape = fx.store.value(id).shape().to_vec();
        *fx.store.value_mut(id) = Tensor::zeros(&shape);
    }
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| false);
    let state = fx.cell.zero_state(&mut tape, 1);
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let next = fx.cell.step(&mut tape, &bind, None, x, &state).unwrap();
    // two Sigmoid vertices contribute 0.5 * 0.5 each, the ReLU ones 0
    let expected = 2.0 * 0.25 / 8.0;
    assert!(tape
        .value(next.output)
        .data()
        .iter()
        .all(|&v| (v - expected).abs() < 1e-15));
    assert!(tape.value(next.vertices[0]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_vertex_output_is_that_vertex() {
    let g = Genotype::chain(&[Identity]).unwrap();
    let fx = fixture(CellKind::Genotype(g), 3, 4, 6);
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| false);
    let mut state = fx.cell.zero_state(&mut tape, 2);
    for seed in 0..3 {
        let x = tape.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng(seed)));
        state = fx.cell.step(&mut tape, &bind, None, x, &state).unwrap();
        assert_eq!(tape.value(state.output), tape.value(state.vertices[1]));
    }
}

#[test]
fn genotype_cell_matches_reference() {
    for timing in [PredecessorTiming::CurrentStep, PredecessorTiming::PreviousStep] {
        for p in Preset::ALL {
            let g = p.genotype();
            let mut fx = fixture(CellKind::Genotype(g.clone()), 5, 4, 7);
            fx.cell = fx.cell.with_timing(timing);
            let (xs, outs) = run(&fx, 3, 4, 8);
            let w = reference::DagWeights::from_store(&fx.store, &fx.cell);
            for b in 0..3 {
                let mut state = vec![vec![0.0; 4]; 9];
                for (x, out) in xs.iter().zip(&outs) {
                    let (o, trace) = reference::genotype_step(&g, timing, &w, &rows(x)[b], &state);
                    state = trace.into_iter().map(|t| t.state).collect();
                    for (a, e) in rows(out)[b].iter().zip(&o) {
                        assert!((a - e).abs() < 1e-12, "{p} {timing:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn traced_step_equals_fused_step() {
    let g = Preset::SigmoidWeighting.genotype();
    let fx = fixture(CellKind::Genotype(g), 4, 3, 9);
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| false);
    let mut fused = fx.cell.zero_state(&mut tape, 2);
    let mut traced = fused.clone();
    for seed in 0..4 {
        let x = tape.constant(Tensor::uniform(&[2, 4], 1.0, &mut rng(seed)));
        fused = fx.cell.step(&mut tape, &bind, None, x, &fused).unwrap();
        traced = fx.cell.step_traced(&mut tape, &bind, x, &traced).unwrap().0;
        assert!(tape.value(fused.output).max_abs_diff(tape.value(traced.output)) < 1e-14);
    }
}

#[test]
fn mixed_cell_matches_brute_force_reference() {
    let fx = fixture(CellKind::Mixed { num_vertices: 4 }, 3, 5, 10);
    let alpha = AlphaTable::from_tensor(fx.store.value(fx.alpha.unwrap())).unwrap();
    let (xs, outs) = run(&fx, 2, 3, 11);
    let w = reference::DagWeights::from_store(&fx.store, &fx.cell);
    for b in 0..2 {
        let mut state = vec![vec![0.0; 5]; 5];
        for (x, out) in xs.iter().zip(&outs) {
            let (o, states) = reference::mixed_step(&alpha, PredecessorTiming::CurrentStep, &w, &rows(x)[b], &state);
            state = states;
            for (a, e) in rows(out)[b].iter().zip(&o) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uniform_alpha_averages_the_activation_branches() {
    let mut fx = fixture(CellKind::Mixed { num_vertices: 1 }, 3, 4, 12);
    *fx.store.value_mut(fx.alpha.unwrap()) = Tensor::zeros(&[1, 4]);
    let (xs, outs) = run(&fx, 1, 1, 13);
    let w = reference::DagWeights::from_store(&fx.store, &fx.cell);
    let zero = vec![vec![0.0; 4]; 2];
    let x = &rows(&xs[0])[0];
    let h0 = reference::genotype_step(
        &Genotype::chain(&[Tanh]).unwrap(),
        PredecessorTiming::CurrentStep,
        &w,
        x,
        &zero,
    )
    .1;
    let mut avg = vec![0.0; 4];
    for f in Activation::ALL {
        let g = Genotype::chain(&[f]).unwrap();
        let (o, _) = reference::genotype_step(&g, PredecessorTiming::CurrentStep, &w, x, &zero);
        for (a, v) in avg.iter_mut().zip(o) {
            *a += v / 4.0;
        }
    }
    assert_eq!(h0.len(), 2);
    assert!(outs[0].data().iter().zip(&avg).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn saturated_alpha_reproduces_the_discrete_cell() {
    let g = Preset::Vanilla.genotype();
    let mut fx = fixture(CellKind::Mixed { num_vertices: 8 }, 6, 4, 14);
    *fx.store.value_mut(fx.alpha.unwrap()) = AlphaTable::saturated(&g, 1e4).to_tensor();
    let discrete = fx.cell.discretized(g).unwrap();
    let (_, mixed) = run(&fx, 3, 3, 15);
    let fx_discrete = Fixture {
        store: fx.store.clone(),
        cell: discrete,
        alpha: None,
    };
    let (_, plain) = run(&fx_discrete, 3, 3, 15);
    for (a, b) in mixed.iter().zip(&plain) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn gru_and_lstm_match_reference() {
    for kind in [CellKind::Gru, CellKind::Lstm] {
        let fx = fixture(kind.clone(), 3, 4, 16);
        let (xs, outs) = run(&fx, 2, 4, 17);
        let w = reference::GatedWeights::from_store(&fx.store, &fx.cell);
        for b in 0..2 {
            let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
            for (x, out) in xs.iter().zip(&outs) {
                let x = &rows(x)[b];
                if kind == CellKind::Gru {
                    h = reference::gru_step(&w, x, &h);
                } else {
                    (h, c) = reference::lstm_step(&w, x, &h, &c);
                }
                assert!(rows(out)[b].iter().zip(&h).all(|(a, e)| (a - e).abs() < 1e-12));
            }
        }
    }
}

fn set_bias_block(store: &mut ParamStore<f64>, id: ParamId, block: usize, hidden: usize, value: f64) {
    let b = store.value_mut(id);
    for k in 0..hidden {
        b.data_mut()[block * hidden + k] = value;
    }
}

#[test]
fn gru_closed_update_gate_keeps_state() {
    let mut fx = fixture(CellKind::Gru, 3, 4, 18);
    let CellParams::Gated { input_bias, .. } = *fx.cell.params() else {
        unreachable!()
    };
    set_bias_block(&mut fx.store, input_bias, 1, 4, 60.0);
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| false);
    let mut state = fx.cell.zero_state(&mut tape, 2);
    state.vertices[0] = tape.constant(Tensor::uniform(&[2, 4], 1.0, &mut rng(19)));
    let x = tape.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng(20)));
    let next = fx.cell.step(&mut tape, &bind, None, x, &state).unwrap();
    assert!(tape.value(next.output).max_abs_diff(tape.value(state.vertices[0])) < 1e-12);
}

#[test]
fn lstm_open_forget_closed_input_keeps_cell_state() {
    let mut fx = fixture(CellKind::Lstm, 3, 4, 21);
    let CellParams::Gated { input_bias, .. } = *fx.cell.params() else {
        unreachable!()
    };
    set_bias_block(&mut fx.store, input_bias, 0, 4, -60.0);
    set_bias_block(&mut fx.store, input_bias, 1, 4, 60.0);
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| false);
    let mut state = fx.cell.zero_state(&mut tape, 2);
    state.vertices[1] = tape.constant(Tensor::uniform(&[2, 4], 1.0, &mut rng(22)));
    let x = tape.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng(23)));
    let next = fx.cell.step(&mut tape, &bind, None, x, &state).unwrap();
    assert!(tape.value(next.vertices[1]).max_abs_diff(tape.value(state.vertices[1])) < 1e-12);
}

fn mixed_loss(fx: &Fixture, t: &mut Tape<f64>, bind: &crate::numerics::Bindings) -> crate::Result<Var> {
    let n = fx.cell.spec().kind.num_vertices().unwrap();
    let mix = MixWeights::new(t, bind[fx.alpha.unwrap()], n)?;
    let mut state = fx.cell.zero_state(t, 2);
    let mut r = rng(24);
    for _ in 0..3 {
        let x = t.constant(Tensor::uniform(&[2, fx.cell.input_dim()], 1.0, &mut r));
        state = fx.cell.step(t, bind, Some(&mix), x, &state)?;
    }
    let sq = t.mul(state.output, state.output)?;
    t.sum(sq)
}

#[test]
fn every_alpha_entry_receives_gradient() {
    let fx = fixture(CellKind::Mixed { num_vertices: 4 }, 3, 4, 25);
    let mut tape = Tape::new();
    let bind = tape.bind_params(&fx.store, |_| true);
    let loss = mixed_loss(&fx, &mut tape, &bind).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.param(fx.alpha.unwrap()).unwrap();
    assert!(g.data().iter().all(|&v| v != 0.0));
}

#[test]
fn mixed_cell_gradients_match_finite_differences() {
    let mut fx = fixture(CellKind::Mixed { num_vertices: 3 }, 3, 4, 26);
    let ids: Vec<ParamId> = fx.store.ids().collect();
    let mut store = std::mem::take(&mut fx.store);
    let report = check_params(
        &mut store,
        &ids,
        |t, b| mixed_loss(&fx, t, b),
        GradCheckConfig {
            probes: 40,
            ..GradCheckConfig::f64_default()
        },
        &mut rng(27),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn gated_cells_gradients_match_finite_differences() {
    for kind in [
        CellKind::Gru,
        CellKind::Lstm,
        CellKind::Genotype(Preset::Vanilla.genotype()),
    ] {
        let fx = fixture(kind, 3, 4, 28);
        let ids: Vec<ParamId> = fx.store.ids().collect();
        let mut store = fx.store.clone();
        let cell = fx.cell.clone();
        let report = check_params(
            &mut store,
            &ids,
            |t, b| {
                let mut state = cell.zero_state(t, 2);
                let mut r = rng(29);
                for _ in 0..3 {
                    let x = t.constant(Tensor::uniform(&[2, 3], 1.0, &mut r));
                    state = cell.step(t, b, None, x, &state)?;
                }
                let sq = t.mul(state.output, state.output)?;
                t.sum(sq)
            },
            GradCheckConfig::f64_default(),
            &mut rng(30),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn registration_shapes_and_names() {
    let mut store = ParamStore::<f32>::new();
    let g = Preset::DirectionalWeightSharing.genotype();
    Cell::register(
        &mut store,
        "c",
        CellSpec::new(CellKind::Genotype(g), 12, 5),
        &mut rng(31),
    )
    .unwrap();
    assert_eq!(store.value(store.lookup("c.w0").unwrap()).shape(), &[17, 10]);
    assert_eq!(store.value(store.lookup("c.w8").unwrap()).shape(), &[5, 10]);
    assert!(store
        .value(store.lookup("c.b3").unwrap())
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert_eq!(store.num_elements(), 17 * 10 + 8 * 5 * 10 + 9 * 10);

    let mut store = ParamStore::<f32>::new();
    Cell::register(&mut store, "g", CellSpec::new(CellKind::Gru, 12, 5), &mut rng(32)).unwrap();
    assert_eq!(store.num_elements(), 3 * 5 * (12 + 5) + 6 * 5);
    let mut store = ParamStore::<f32>::new();
    Cell::register(&mut store, "l", CellSpec::new(CellKind::Lstm, 12, 5), &mut rng(33)).unwrap();
    assert_eq!(store.num_elements(), 4 * 5 * (12 + 5) + 8 * 5);

    let bound = 1.0 / (17f32).sqrt();
    let mut store = ParamStore::<f32>::new();
    let c = Cell::register(&mut store, "c", CellSpec::new(CellKind::Gru, 0, 5), &mut rng(34));
    assert!(c.is_err());
    let mixed = CellSpec::new(CellKind::Mixed { num_vertices: 2 }, 12, 5);
    let c = Cell::register(&mut store, "d", mixed.clone().with_init(Init::FanIn), &mut rng(35)).unwrap();
    let CellParams::Dag { weights, .. } = c.params() else {
        unreachable!()
    };
    assert!(store.value(weights[0]).data().iter().all(|v| v.abs() <= bound));
    let c = Cell::register(&mut store, "e", mixed.with_init(Init::Scaled), &mut rng(35)).unwrap();
    let CellParams::Dag { weights, .. } = c.params() else {
        unreachable!()
    };
    let w = store.value(weights[0]).data();
    assert!(w.iter().all(|v| v.abs() <= bound * Init::Scaled.dag_gain() as f32));
    assert!(w.iter().any(|v| v.abs() > bound));
}
