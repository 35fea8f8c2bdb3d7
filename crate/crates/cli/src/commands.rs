//! The subcommands, as library functions writing into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use dartsrenet::cells::{
    Activation, AlphaTable, Cell, CellKind, CellSpec, Genotype, GenotypeEntry, MixWeights, Preset,
};
use dartsrenet::data::{load_cifar10, load_raw, synthetic, Corpus, ImageShape, NormStats, SplitTag};
use dartsrenet::model::{Model, NetworkConfig};
use dartsrenet::numerics::gradcheck::{check_params, GradCheckConfig};
use dartsrenet::numerics::suite::run_primitive_suite;
use dartsrenet::numerics::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor};
use dartsrenet::reference;
use dartsrenet::renet::Variant;
use dartsrenet::search::{
    evaluate_dataset, multi_seed_search, retrain, retrain_report_csv, run_search, search_report_csv, write_text,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CellSource, Command, DatasetKind, Precision, RunConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATS_FILE: &str = "norm_stats.txt";

const SYNTHETIC_TRAIN_SEED: u64 = 1;
const SYNTHETIC_TEST_SEED: u64 = 2;

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_string())?;
    Ok(())
}

fn resolve(root: &Path, file: &Path) -> PathBuf {
    if file.is_relative() && !root.as_os_str().is_empty() {
        root.join(file)
    } else {
        file.to_path_buf()
    }
}

/// Loads the configured train and test splits, truncated to the limits.
pub fn load_corpus(cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let corpus = match cfg.dataset {
        DatasetKind::Cifar10 => load_cifar10(&cfg.data_root)?,
        DatasetKind::Drim => Corpus {
            train: load_raw(&resolve(&cfg.data_root, &cfg.train_file))?,
            test: load_raw(&resolve(&cfg.data_root, &cfg.test_file))?,
        },
        DatasetKind::Synthetic => {
            let shape = ImageShape::new(3, cfg.synthetic_size, cfg.synthetic_size);
            Corpus {
                train: synthetic(cfg.synthetic_train, shape, SplitTag::Train, SYNTHETIC_TRAIN_SEED),
                test: synthetic(cfg.synthetic_test, shape, SplitTag::Test, SYNTHETIC_TEST_SEED),
            }
        }
    };
    if corpus.train.shape() != corpus.test.shape() {
        bail!(
            "train images are {:?} but test images are {:?}",
            corpus.train.shape(),
            corpus.test.shape()
        );
    }
    let limit = |d: dartsrenet::data::Dataset, n: usize| if n > 0 { d.take(n) } else { d };
    Ok(Corpus {
        train: limit(corpus.train, cfg.train_limit),
        test: limit(corpus.test, cfg.test_limit),
    })
}

fn network_for(cfg: &RunConfig, corpus: &Corpus) -> anyhow::Result<NetworkConfig> {
    let s = corpus.train.shape();
    Ok(cfg.network((s.channels, s.height, s.width))?)
}

fn alpha_csv(alpha: &AlphaTable) -> String {
    let mut out = String::from("vertex,pred,act,logit,weight\n");
    for i in 1..=alpha.num_vertices() {
        let w = alpha.vertex_weights(i);
        let mut k = 0;
        for j in 0..i {
            for f in Activation::ALL {
                let _ = writeln!(out, "{i},{j},{f},{},{}", alpha.get(j, i, f), w[k]);
                k += 1;
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct SearchSummary {
    pub genotype: Genotype,
    pub epochs: usize,
}

pub fn search(cfg: &RunConfig, out: &Path) -> anyhow::Result<SearchSummary> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let corpus = load_corpus(cfg)?;
    let network = network_for(cfg, &corpus)?;
    let settings = cfg.train_settings();
    if !cfg.search_seeds.is_empty() {
        let report = match cfg.precision {
            Precision::F32 => {
                multi_seed_search::<f32>(&corpus.train, &network, &settings, cfg.split(), &cfg.search_seeds)?
            }
            Precision::F64 => {
                multi_seed_search::<f64>(&corpus.train, &network, &settings, cfg.split(), &cfg.search_seeds)?
            }
        };
        let mut csv = String::from("vertex,pred,act,agreement\n");
        for a in &report.agreement {
            let _ = writeln!(csv, "{},{},{},{}", a.vertex, a.modal.pred, a.modal.act, a.agreement);
        }
        write_text(&out.join("agreement.csv"), &csv)?;
        for (seed, g) in report.seeds.iter().zip(&report.genotypes) {
            g.save(&out.join(format!("genotype_seed{seed}.txt")))?;
        }
        let modal = Genotype::new(report.agreement.iter().map(|a| a.modal).collect())?;
        modal.save(&out.join(GENOTYPE_FILE))?;
        write_text(&out.join("genotype.dot"), &modal.to_dot())?;
        return Ok(SearchSummary {
            genotype: modal,
            epochs: 0,
        });
    }
    let (genotype, alpha, report) = match cfg.precision {
        Precision::F32 => {
            let o = run_search::<f32>(&corpus.train, network, &settings, cfg.split())?;
            (o.genotype, o.alpha, o.report)
        }
        Precision::F64 => {
            let o = run_search::<f64>(&corpus.train, network, &settings, cfg.split())?;
            (o.genotype, o.alpha, o.report)
        }
    };
    genotype.save(&out.join(GENOTYPE_FILE))?;
    write_text(&out.join("genotype.dot"), &genotype.to_dot())?;
    write_text(&out.join("alpha.csv"), &alpha_csv(&alpha))?;
    write_text(&out.join("search_report.csv"), &search_report_csv(&report))?;
    Ok(SearchSummary {
        genotype,
        epochs: report.len(),
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub test_accuracy: f64,
    pub best_val_acc: f64,
    pub epochs: usize,
    pub parameters: usize,
}

fn train_with<F: Scalar>(
    cfg: &RunConfig,
    corpus: &Corpus,
    network: NetworkConfig,
    out: &Path,
) -> anyhow::Result<TrainSummary> {
    let start = Instant::now();
    let o = retrain::<F>(
        &corpus.train,
        Some(&corpus.test),
        network,
        &cfg.train_settings(),
        cfg.split(),
    )?;
    o.model.save(&out.join(CHECKPOINT_FILE))?;
    o.stats.save(&out.join(STATS_FILE))?;
    write_text(&out.join("retrain_report.csv"), &retrain_report_csv(&o.report))?;
    let params = o.model.count_parameters();
    let test_accuracy = o.test_accuracy.unwrap_or(f64::NAN);
    let metrics = format!(
        "test_accuracy = {test_accuracy}\nbest_val_acc = {}\nepochs = {}\nparameters = {}\nrnn_parameters = {}\ntrain_items = {}\ntest_items = {}\nseconds = {:.1}\n",
        o.best_val_acc,
        o.report.len(),
        params.total(),
        params.rnn(),
        corpus.train.len(),
        corpus.test.len(),
        start.elapsed().as_secs_f64()
    );
    write_text(&out.join("metrics.txt"), &metrics)?;
    Ok(TrainSummary {
        test_accuracy,
        best_val_acc: o.best_val_acc,
        epochs: o.report.len(),
        parameters: params.total(),
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let corpus = load_corpus(cfg)?;
    let network = network_for(cfg, &corpus)?;
    if let CellKind::Genotype(g) = &network.renet[0].cell {
        g.save(&out.join(GENOTYPE_FILE))?;
    }
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &corpus, network, out),
        Precision::F64 => train_with::<f64>(cfg, &corpus, network, out),
    }
}

/// Reads the configuration a `train` run froze into `dir`, with `overrides`
/// applied on top. A DAG cell is taken from the run's genotype copy.
pub fn trained_config(dir: &Path, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::new(Command::Eval);
    cfg.apply_file(&dir.join(CONFIG_FILE))?;
    let copy = dir.join(GENOTYPE_FILE);
    if matches!(cfg.cell, CellSource::Preset(_) | CellSource::File(_)) && copy.is_file() {
        cfg.set("cell", &copy.display().to_string())?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn eval_with<F: Scalar>(cfg: &RunConfig, corpus: &Corpus, network: NetworkConfig, from: &Path) -> anyhow::Result<f64> {
    let mut model = Model::<F>::build(network, cfg.seed)?;
    model.load(&from.join(CHECKPOINT_FILE))?;
    let stats = NormStats::load(&from.join(STATS_FILE))?;
    Ok(evaluate_dataset(&model, &corpus.test, &stats, cfg.eval_batch_size)?)
}

/// Scores the checkpoint in `from` on the configured test split.
pub fn eval(from: &Path, overrides: &[(String, String)], out: &Path) -> anyhow::Result<f64> {
    let cfg = trained_config(from, overrides)?;
    cfg.validate()?;
    let corpus = load_corpus(&cfg)?;
    let network = network_for(&cfg, &corpus)?;
    let acc = match cfg.precision {
        Precision::F32 => eval_with::<f32>(&cfg, &corpus, network, from)?,
        Precision::F64 => eval_with::<f64>(&cfg, &corpus, network, from)?,
    };
    fs::create_dir_all(out)?;
    write_text(
        &out.join("eval.txt"),
        &format!(
            "checkpoint = {}\ntest_accuracy = {acc}\ntest_items = {}\n",
            from.join(CHECKPOINT_FILE).display(),
            corpus.test.len()
        ),
    )?;
    Ok(acc)
}

/// DOT graph of a preset name or a genotype file.
pub fn export_dot(source: &str) -> anyhow::Result<String> {
    let genotype = match source.parse::<Preset>() {
        Ok(p) => p.genotype(),
        Err(_) => Genotype::load(Path::new(source))
            .with_context(|| format!("`{source}` is neither a preset nor a readable genotype file"))?,
    };
    Ok(genotype.to_dot())
}

#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn tiny_network(cell: CellKind, variant: Variant) -> NetworkConfig {
    let mut c = NetworkConfig::with_sizes(cell, variant, 2, 3, 4);
    c.input = (3, 8, 8);
    c
}

fn model_gradcheck(network: NetworkConfig, seed: u64) -> anyhow::Result<f64> {
    let mut model = Model::<f64>::build(network, seed)?;
    let x = Tensor::<f64>::uniform(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let (net, store) = model.parts_mut();
    let ids: Vec<ParamId> = store.ids().collect();
    let report = check_params(
        store,
        &ids,
        |t, b| {
            let v = t.constant(x.clone());
            net.loss(t, b, v, &[1, 4])
        },
        GradCheckConfig::f64_default(),
        &mut ChaCha8Rng::seed_from_u64(seed + 2),
    )?;
    Ok(report.max_rel_error())
}

fn preset_oracle_error() -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for preset in Preset::ALL {
        let g = preset.genotype();
        let mut store = ParamStore::<f64>::new();
        let cell = Cell::register(
            &mut store,
            "cell",
            CellSpec::new(CellKind::Genotype(g.clone()), 4, 5),
            &mut rng,
        )?;
        let w = reference::DagWeights::from_store(&store, &cell);
        let mut tape = Tape::new();
        let bind = tape.bind_params(&store, |_| false);
        let mut state = cell.zero_state(&mut tape, 1);
        let mut oracle = vec![vec![0.0; 5]; g.num_vertices() + 1];
        for _ in 0..4 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xv = tape.constant(Tensor::from_f64(&[1, 4], &x)?);
            state = cell.step(&mut tape, &bind, None, xv, &state)?;
            let (expected, trace) = reference::genotype_step(&g, cell.spec().timing, &w, &x, &oracle);
            oracle = trace.into_iter().map(|t| t.state).collect();
            for (a, e) in tape.value(state.output).to_f64_vec().iter().zip(&expected) {
                worst = worst.max((a - e).abs());
            }
        }
    }
    Ok(worst)
}

fn relaxation_error() -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for preset in Preset::ALL {
        let g = preset.genotype();
        let n = g.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let mixed = Cell::register(
            &mut store,
            "cell",
            CellSpec::new(CellKind::Mixed { num_vertices: n }, 4, 5),
            &mut rng,
        )?;
        let alpha = store.add(
            "alpha",
            AlphaTable::saturated(&g, 40.0).to_tensor(),
            ParamGroup::Architecture,
        );
        let discrete = mixed.discretized(g)?;
        let mut tape = Tape::new();
        let bind = tape.bind_params(&store, |_| false);
        let mix = MixWeights::new(&mut tape, bind[alpha], n)?;
        let (mut a, mut b) = (mixed.zero_state(&mut tape, 2), discrete.zero_state(&mut tape, 2));
        for _ in 0..3 {
            let x = tape.constant(Tensor::uniform(&[2, 4], 1.0, &mut rng));
            a = mixed.step(&mut tape, &bind, Some(&mix), x, &a)?;
            b = discrete.step(&mut tape, &bind, None, x, &b)?;
            worst = worst.max(tape.value(a.output).max_abs_diff(tape.value(b.output)));
        }
    }
    Ok(worst)
}

fn derivation_mismatches() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    (0..200)
        .filter(|_| {
            let n = rng.gen_range(1..=4);
            let mut t = AlphaTable::zeros(n);
            for i in 1..=n {
                for j in 0..i {
                    for f in Activation::ALL {
                        t.set(j, i, f, rng.gen_range(-2..=2) as f64);
                    }
                }
            }
            t.derive_genotype() != reference::derive_genotype(&t)
        })
        .count()
}

/// Gradient checks and oracle comparisons that need no data.
pub fn selftest() -> anyhow::Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (label, results, tol) in [
        (
            "primitive gradients (f64)",
            run_primitive_suite::<f64>(GradCheckConfig::f64_default(), 3)?,
            1e-4,
        ),
        (
            "primitive gradients (f32)",
            run_primitive_suite::<f32>(GradCheckConfig::f32_default(), 3)?,
            1e-2,
        ),
    ] {
        let failing: Vec<&str> = results
            .iter()
            .filter(|(_, r)| !r.passes(tol))
            .map(|(n, _)| *n)
            .collect();
        let worst = results.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
        checks.push(check(
            label,
            failing.is_empty(),
            format!("{} ops, max rel err {worst:.2e}, failing {failing:?}", results.len()),
        ));
    }
    for (label, network) in [
        (
            "model gradients, mixed cell",
            tiny_network(CellKind::Mixed { num_vertices: 3 }, Variant::Vanilla),
        ),
        (
            "model gradients, weight-shared DAG cell",
            tiny_network(
                CellKind::Genotype(Preset::DirectionalWeightSharing.genotype()),
                Variant::DirectionalWeightSharing,
            ),
        ),
        (
            "model gradients, sigmoid-weighted LSTM",
            tiny_network(CellKind::Lstm, Variant::SigmoidWeighting),
        ),
    ] {
        let err = model_gradcheck(network, 17)?;
        checks.push(check(label, err <= 1e-4, format!("max rel err {err:.2e}")));
    }
    let e = preset_oracle_error()?;
    checks.push(check(
        "preset cells vs straight-line oracle",
        e <= 1e-10,
        format!("max abs diff {e:.2e}"),
    ));
    let e = relaxation_error()?;
    checks.push(check(
        "saturated mixed cell vs discrete cell",
        e <= 1e-6,
        format!("max abs diff {e:.2e}"),
    ));
    let m = derivation_mismatches();
    checks.push(check(
        "genotype derivation vs brute force",
        m == 0,
        format!("{m} mismatches in 200 tables"),
    ));
    let mut cells: Vec<Genotype> = Preset::ALL.iter().map(|p| p.genotype()).collect();
    cells.push(Genotype::new(vec![GenotypeEntry::new(0, Activation::Tanh)])?);
    let mut same = true;
    for g in &cells {
        same &= g.to_string().parse::<Genotype>()? == *g;
    }
    checks.push(check(
        "genotype text round trip",
        same,
        format!("{} cells", cells.len()),
    ));
    Ok(checks)
}
