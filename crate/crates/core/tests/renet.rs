use dartsrenet::cells::{Activation, Cell, CellKind, CellParams, CellSpec, Genotype, Preset};
use dartsrenet::numerics::gradcheck::{check_params, GradCheckConfig};
use dartsrenet::numerics::{ParamGroup, ParamStore, Tape, Tensor, Var};
use dartsrenet::reference;
use dartsrenet::renet::{
    apply_sigmoid_weighting, extract_patches, patch_map, reconstruct, sweep_map, Direction, Orientation, ReNetLayer,
    ReNetLayerConfig, SweepCells, Variant, Window,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

fn sweep_cells(
    store: &mut ParamStore<f64>,
    kind: CellKind,
    input: usize,
    hidden: usize,
    shared: bool,
    seed: u64,
) -> SweepCells {
    let mut r = rng(seed);
    let forward = Cell::register(
        store,
        &format!("s{seed}.f"),
        CellSpec::new(kind.clone(), input, hidden),
        &mut r,
    )
    .unwrap();
    let backward = if shared {
        forward.clone()
    } else {
        Cell::register(store, &format!("s{seed}.b"), CellSpec::new(kind, input, hidden), &mut r).unwrap()
    };
    SweepCells { forward, backward }
}

fn sweep(store: &ParamStore<f64>, cells: &SweepCells, map: &Tensor<f64>, orientation: Orientation) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bind = tape.bind_params(store, |_| false);
    let x = tape.constant(map.clone());
    let y = sweep_map(&mut tape, &bind, None, cells, x, orientation, None).unwrap();
    tape.value(y).clone()
}

/// Permutes an `N x C x H x W` tensor by mapping output coordinates to input ones.
fn remap(t: &Tensor<f64>, shape: [usize; 4], src: impl Fn(usize, usize, usize, usize) -> [usize; 4]) -> Tensor<f64> {
    let mut out = Tensor::zeros(&shape);
    for b in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                for x in 0..shape[3] {
                    out.set(&[b, c, y, x], t.get(&src(b, c, y, x)));
                }
            }
        }
    }
    out
}

fn transpose_hw(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    remap(t, [s[0], s[1], s[3], s[2]], |b, c, y, x| [b, c, x, y])
}

fn reverse_columns(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    let w = s[3];
    remap(t, [s[0], s[1], s[2], s[3]], |b, c, y, x| [b, c, y, w - 1 - x])
}

fn swap_halves(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    let h = s[1] / 2;
    remap(t, [s[0], s[1], s[2], s[3]], |b, c, y, x| [b, (c + h) % (2 * h), y, x])
}

fn dag() -> CellKind {
    CellKind::Genotype(Preset::SigmoidWeighting.genotype())
}

#[test]
fn patch_grid_shapes() {
    let img = random(&[3, 32, 32], 1);
    let g = extract_patches(&img, Window::square(2)).unwrap();
    assert_eq!((g.grid_height, g.grid_width, g.patch_dim()), (16, 16, 12));
    // channel, then row, then column within the patch
    assert_eq!(g.patch(1, 2)[0], img.get(&[0, 2, 4]));
    assert_eq!(g.patch(1, 2)[1], img.get(&[0, 2, 5]));
    assert_eq!(g.patch(1, 2)[2], img.get(&[0, 3, 4]));
    assert_eq!(g.patch(1, 2)[4], img.get(&[1, 2, 4]));

    let g1 = extract_patches(&img, Window::square(1)).unwrap();
    assert_eq!((g1.grid_height, g1.grid_width, g1.patch_dim()), (32, 32, 3));
    assert_eq!(
        g1.patch(5, 7),
        &[img.get(&[0, 5, 7]), img.get(&[1, 5, 7]), img.get(&[2, 5, 7])]
    );
}

#[test]
fn reconstruct_inverts_extraction() {
    for (shape, win) in [
        ([3, 32, 32], Window::square(2)),
        ([2, 6, 9], Window { height: 3, width: 3 }),
        ([1, 4, 4], Window::square(1)),
    ] {
        let img = random(&shape, 2);
        let g = extract_patches(&img, win).unwrap();
        assert_eq!(reconstruct(&g, win, shape[0], shape[1], shape[2]).unwrap(), img);
    }
}

#[test]
fn indivisible_inputs_are_zero_padded() {
    let img = random(&[1, 5, 5], 3);
    let g = extract_patches(&img, Window::square(2)).unwrap();
    assert_eq!((g.grid_height, g.grid_width), (3, 3));
    assert_eq!(g.patch(2, 2), &[img.get(&[0, 4, 4]), 0.0, 0.0, 0.0]);
    assert_eq!(reconstruct(&g, Window::square(2), 1, 5, 5).unwrap(), img);
}

#[test]
fn tape_patch_map_agrees_with_extraction() {
    let x = random(&[2, 3, 6, 5], 4);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let m = patch_map(&mut tape, v, Window::square(2)).unwrap();
    let m = tape.value(m).clone();
    assert_eq!(m.shape(), &[2, 12, 3, 3]);
    for b in 0..2 {
        let img = Tensor::new(&[3, 6, 5], x.data()[b * 90..(b + 1) * 90].to_vec()).unwrap();
        let g = extract_patches(&img, Window::square(2)).unwrap();
        for gy in 0..3 {
            for gx in 0..3 {
                for k in 0..12 {
                    assert_eq!(m.get(&[b, k, gy, gx]), g.patch(gy, gx)[k]);
                }
            }
        }
    }
}

#[test]
fn single_position_grid_runs_one_step_each_way() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, dag(), 4, 3, true, 5);
    let y = sweep(&store, &cells, &random(&[2, 4, 1, 1], 6), Orientation::Horizontal);
    assert_eq!(y.shape(), &[2, 6, 1, 1]);
    assert_eq!(&y.data()[..3], &y.data()[3..6]);
}

#[test]
fn zero_input_and_weights_give_zero_map() {
    let g = Genotype::chain(&[Activation::ReLU, Activation::Tanh, Activation::Identity]).unwrap();
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, CellKind::Genotype(g), 4, 3, false, 7);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    for o in [Orientation::Horizontal, Orientation::Vertical] {
        let y = sweep(&store, &cells, &Tensor::zeros(&[1, 4, 3, 3]), o);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn reversed_columns_swap_directions() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, dag(), 3, 4, false, 8);
    let swapped = SweepCells {
        forward: cells.backward.clone(),
        backward: cells.forward.clone(),
    };
    let x = random(&[1, 3, 4, 4], 9);
    let lhs = sweep(&store, &swapped, &reverse_columns(&x), Orientation::Horizontal);
    let rhs = swap_halves(&reverse_columns(&sweep(&store, &cells, &x, Orientation::Horizontal)));
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn vertical_sweep_is_transposed_horizontal_sweep() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, CellKind::Gru, 5, 3, false, 10);
    let x = random(&[2, 5, 3, 4], 11);
    let v = sweep(&store, &cells, &x, Orientation::Vertical);
    let h = transpose_hw(&sweep(&store, &cells, &transpose_hw(&x), Orientation::Horizontal));
    assert_eq!(v.shape(), &[2, 6, 3, 4]);
    assert!(v.max_abs_diff(&h) < 1e-12);
}

#[test]
fn two_step_column_matches_hand_unroll() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, CellKind::Gru, 3, 2, false, 12);
    let x = random(&[1, 3, 2, 1], 13);
    let y = sweep(&store, &cells, &x, Orientation::Vertical);
    let wf = reference::GatedWeights::from_store(&store, &cells.forward);
    let wb = reference::GatedWeights::from_store(&store, &cells.backward);
    let px = |y: usize| (0..3).map(|c| x.get(&[0, c, y, 0])).collect::<Vec<_>>();
    let zero = vec![0.0; 2];
    let f0 = reference::gru_step(&wf, &px(0), &zero);
    let f1 = reference::gru_step(&wf, &px(1), &f0);
    let b1 = reference::gru_step(&wb, &px(1), &zero);
    let b0 = reference::gru_step(&wb, &px(0), &b1);
    for (row, expect) in [(0, [f0, b0].concat()), (1, [f1, b1].concat())] {
        for (c, e) in expect.iter().enumerate() {
            assert!((y.get(&[0, c, row, 0]) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn sweeps_start_from_zero_state() {
    let mut store = ParamStore::new();
    let cfg = ReNetLayerConfig::new(2, 3, Variant::Vanilla, dag());
    let layer = ReNetLayer::register(&mut store, "renet1", cfg, (2, 4, 6), &mut rng(14)).unwrap();
    let mut tape = Tape::new();
    let bind = tape.bind_params(&store, |_| false);
    let x = tape.constant(random(&[2, 2, 4, 6], 15));
    let mut firsts = Vec::new();
    let mut probe = |t: &Tape<f64>, dir: Direction, step: usize, s: &dartsrenet::cells::CellState| {
        let zero = s.vertices.iter().all(|&v| t.value(v).data().iter().all(|&e| e == 0.0));
        firsts.push((dir, step, zero));
    };
    layer
        .forward_probed(&mut tape, &bind, None, x, Some(&mut probe))
        .unwrap();
    // horizontal: 3 steps x 2 directions; vertical: 2 steps x 2 directions
    assert_eq!(firsts.len(), 10);
    let starts = [
        (0, Direction::Forward, 0),
        (3, Direction::Backward, 2),
        (6, Direction::Forward, 0),
        (8, Direction::Backward, 1),
    ];
    for (k, dir, step) in starts {
        assert_eq!((firsts[k].0, firsts[k].1), (dir, step));
        assert!(firsts[k].2, "sweep start {k} not zero");
    }
    assert!(firsts.iter().filter(|f| !f.2).count() >= 6);
}

#[test]
fn backward_weights_do_not_touch_forward_half() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, dag(), 3, 4, false, 16);
    let x = random(&[2, 3, 3, 5], 17);
    let before = sweep(&store, &cells, &x, Orientation::Horizontal);
    for id in cells.backward.params().ids() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(&shape, 2.0, &mut rng(18));
    }
    let after = sweep(&store, &cells, &x, Orientation::Horizontal);
    // per sample: 4 forward channels then 4 backward channels of a 3x5 grid
    for b in 0..2 {
        let s = b * 8 * 15;
        assert_eq!(&before.data()[s..s + 4 * 15], &after.data()[s..s + 4 * 15]);
        assert_ne!(
            &before.data()[s + 4 * 15..s + 8 * 15],
            &after.data()[s + 4 * 15..s + 8 * 15]
        );
    }
}

#[test]
fn rows_are_independent_sequences() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, CellKind::Lstm, 2, 3, false, 19);
    let x = random(&[1, 2, 4, 3], 20);
    let perm = [2usize, 0, 3, 1];
    let px = remap(&x, [1, 2, 4, 3], |b, c, y, xx| [b, c, perm[y], xx]);
    let y = sweep(&store, &cells, &x, Orientation::Horizontal);
    let py = sweep(&store, &cells, &px, Orientation::Horizontal);
    let expect = remap(&y, [1, 6, 4, 3], |b, c, yy, xx| [b, c, perm[yy], xx]);
    assert_eq!(py, expect);
}

#[test]
fn shared_directions_on_palindromic_rows() {
    let mut store = ParamStore::new();
    let cells = sweep_cells(&mut store, dag(), 2, 3, true, 21);
    let base = random(&[1, 2, 2, 3], 22);
    let pal = remap(&base, [1, 2, 2, 5], |b, c, y, x| [b, c, y, x.min(4 - x)]);
    let y = sweep(&store, &cells, &pal, Orientation::Horizontal);
    for row in 0..2 {
        for x in 0..5 {
            for c in 0..3 {
                assert!((y.get(&[0, c, row, x]) - y.get(&[0, 3 + c, row, 4 - x])).abs() < 1e-12);
            }
        }
    }
    let y = sweep(&store, &cells, &random(&[1, 2, 2, 5], 23), Orientation::Horizontal);
    let differs = (0..5).any(|x| (0..3).any(|c| y.get(&[0, c, 0, x]) != y.get(&[0, 3 + c, 0, x])));
    assert!(differs);
}

#[test]
fn sigmoid_weighting_limits() {
    let x = random(&[2, 3, 2, 2], 24);
    let mut tape = Tape::new();
    let m = tape.constant(x.clone());
    let zero = tape.constant(Tensor::zeros(&[4]));
    let half = apply_sigmoid_weighting(&mut tape, m, zero).unwrap();
    assert!(tape.value(half).max_abs_diff(&x.map(|v| v / 2.0)) < 1e-15);
    let neg = tape.constant(Tensor::full(&[4], -800.0));
    let off = apply_sigmoid_weighting(&mut tape, m, neg).unwrap();
    assert!(tape.value(off).data().iter().all(|&v| v == 0.0));
    let mut mixed = Tensor::zeros(&[4]);
    mixed.data_mut()[3] = -800.0;
    let w = tape.constant(mixed);
    let y = apply_sigmoid_weighting(&mut tape, m, w).unwrap();
    assert_eq!(tape.value(y).get(&[1, 2, 1, 1]), 0.0);
    assert_eq!(tape.value(y).get(&[1, 2, 1, 0]), x.get(&[1, 2, 1, 0]) / 2.0);
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(apply_sigmoid_weighting(&mut tape, m, bad).is_err());
}

fn layer_output(store: &ParamStore<f64>, layer: &ReNetLayer, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bind = tape.bind_params(store, |_| false);
    let v = tape.constant(x.clone());
    let y = layer.forward(&mut tape, &bind, None, v).unwrap();
    tape.value(y).clone()
}

#[test]
fn saturated_sigmoid_weighting_equals_vanilla() {
    let mut vs = ParamStore::new();
    let vanilla = ReNetLayer::register(
        &mut vs,
        "renet1",
        ReNetLayerConfig::new(2, 3, Variant::Vanilla, dag()),
        (2, 4, 4),
        &mut rng(25),
    )
    .unwrap();
    let mut ss = ParamStore::new();
    let sw = ReNetLayer::register(
        &mut ss,
        "renet1",
        ReNetLayerConfig::new(2, 3, Variant::SigmoidWeighting, dag()),
        (2, 4, 4),
        &mut rng(25),
    )
    .unwrap();
    *ss.value_mut(sw.sigmoid_weights.unwrap()) = Tensor::full(&[4], 60.0);
    assert_eq!(ss.num_elements(), vs.num_elements() + 4);
    let x = random(&[1, 2, 4, 4], 26);
    assert!(layer_output(&vs, &vanilla, &x).max_abs_diff(&layer_output(&ss, &sw, &x)) < 1e-12);
}

#[test]
fn sigmoid_weight_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let layer = ReNetLayer::register(
        &mut store,
        "renet1",
        ReNetLayerConfig::new(2, 3, Variant::SigmoidWeighting, dag()),
        (2, 4, 4),
        &mut rng(27),
    )
    .unwrap();
    let sw = layer.sigmoid_weights.unwrap();
    *store.value_mut(sw) = random(&[4], 28);
    let x = random(&[2, 2, 4, 4], 29);
    let report = check_params(
        &mut store,
        &[sw],
        |t, b| {
            let v = t.constant(x.clone());
            let y = layer.forward(t, b, None, v)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        },
        GradCheckConfig::f64_default(),
        &mut rng(30),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn layer_gradients_match_finite_differences() {
    for variant in [Variant::Vanilla, Variant::DirectionalWeightSharing] {
        let mut store = ParamStore::new();
        let layer = ReNetLayer::register(
            &mut store,
            "renet1",
            ReNetLayerConfig::new(2, 3, variant, dag()),
            (2, 4, 3),
            &mut rng(31),
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        let x = random(&[2, 2, 4, 3], 32);
        let report = check_params(
            &mut store,
            &ids,
            |t, b| {
                let v = t.constant(x.clone());
                let y = layer.forward(t, b, None, v)?;
                let y = t.tanh(y)?;
                t.sum(y)
            },
            GradCheckConfig {
                probes: 30,
                ..GradCheckConfig::f64_default()
            },
            &mut rng(33),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{variant}: {report:?}");
    }
}

#[test]
fn layer_shapes_follow_the_window_schedule() {
    let mut store = ParamStore::<f32>::new();
    let mut shape = (3, 32, 32);
    let mut expected = vec![];
    let mut layers = vec![];
    for k in 1..=3 {
        let cfg = ReNetLayerConfig::new(2, 256, Variant::Vanilla, CellKind::Genotype(Preset::Vanilla.genotype()));
        let layer = ReNetLayer::register(&mut store, &format!("renet{k}"), cfg, shape, &mut rng(k)).unwrap();
        shape = layer.output_shape();
        expected.push(shape);
        layers.push(layer);
    }
    assert_eq!(expected, vec![(512, 16, 16), (512, 8, 8), (512, 4, 4)]);

    let mut tape = Tape::new();
    let bind = tape.bind_params(&store, |_| false);
    let mut x: Var = tape.constant(Tensor::uniform(&[1, 3, 32, 32], 1.0, &mut rng(34)));
    for (layer, e) in layers.iter().zip(&expected) {
        x = layer.forward(&mut tape, &bind, None, x).unwrap();
        assert_eq!(tape.shape(x), &[1, e.0, e.1, e.2]);
    }

    let mut s = ParamStore::<f32>::new();
    let odd = ReNetLayer::register(
        &mut s,
        "renet1",
        ReNetLayerConfig::new(2, 4, Variant::Vanilla, CellKind::Gru),
        (3, 5, 7),
        &mut rng(35),
    )
    .unwrap();
    assert_eq!(odd.output_shape(), (8, 3, 4));
}

#[test]
fn weight_sharing_halves_recurrent_parameters() {
    for kind in [
        dag(),
        CellKind::Gru,
        CellKind::Lstm,
        CellKind::Mixed { num_vertices: 3 },
    ] {
        let count = |variant| {
            let mut s = ParamStore::<f32>::new();
            let l = ReNetLayer::register(
                &mut s,
                "renet1",
                ReNetLayerConfig::new(2, 5, variant, kind.clone()),
                (3, 8, 8),
                &mut rng(36),
            )
            .unwrap();
            assert!(s.iter().all(|(_, p)| p.group == ParamGroup::Weights));
            (s.num_elements(), l)
        };
        let (vanilla, _) = count(Variant::Vanilla);
        let (dws, layer) = count(Variant::DirectionalWeightSharing);
        assert_eq!(2 * dws, vanilla);
        assert_eq!(layer.horizontal.forward.params(), layer.horizontal.backward.params());
        if let CellParams::Dag { weights, .. } = layer.vertical.backward.params() {
            assert_eq!(weights.len(), kind.num_vertices().unwrap() + 1);
        }
    }
}
