//! Cell search by alternating weight and architecture updates, retraining
//! of a discrete cell, and repeated searches.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cells::{AlphaTable, CellKind, Genotype, GenotypeEntry};
use crate::data::{
    make_batch, make_splits, sequential_batches, shuffled_batches, AugmentConfig, Dataset, NormStats, Pipeline,
    SplitMode,
};
use crate::error::{Error, Result};
use crate::model::{Accuracy, Model, NetworkConfig};
use crate::numerics::{Optimizer, OptimizerKind, ParamGroup, ParamId, Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl OptimSettings {
    pub fn weights_default() -> Self {
        OptimSettings {
            kind: OptimizerKind::adam(),
            learning_rate: 1e-3,
            clip_norm: Some(0.25),
        }
    }

    pub fn alpha_default() -> Self {
        OptimSettings {
            kind: OptimizerKind::adam(),
            learning_rate: 3e-4,
            clip_norm: None,
        }
    }

    fn build<F: Scalar>(&self, params: Vec<ParamId>, model: &Model<F>) -> Optimizer<F> {
        Optimizer::new(self.kind, self.learning_rate, params, model.store()).with_clip_norm(self.clip_norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement tolerated before stopping.
    pub patience: usize,
    /// Caps the paired batches of one epoch.
    pub max_batches_per_epoch: Option<usize>,
    pub weights: OptimSettings,
    pub alpha: OptimSettings,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 64,
            eval_batch_size: 256,
            max_epochs: 50,
            patience: 5,
            max_batches_per_epoch: None,
            weights: OptimSettings::weights_default(),
            alpha: OptimSettings::alpha_default(),
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("max_batches_per_epoch must be positive".into()));
        }
        for (name, o) in [("weights", &self.weights), ("alpha", &self.alpha)] {
            if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} learning rate {} is invalid",
                    o.learning_rate
                )));
            }
            if o.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
                return Err(Error::Config(format!("{name} clip norm must be positive")));
            }
        }
        Ok(())
    }

    fn derived_seed(&self, purpose: u64) -> u64 {
        self.seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Which optimizer ran, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Architecture,
    Weights,
}

/// Losses observed by one paired step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub val_loss: f64,
    pub train_loss: f64,
}

/// A search network with one optimizer for the weights and one for the
/// architecture parameters.
pub struct SearchState<F: Scalar> {
    pub model: Model<F>,
    weight_opt: Optimizer<F>,
    alpha_opt: Optimizer<F>,
    log: Vec<StepKind>,
}

impl<F: Scalar> SearchState<F> {
    pub fn new(model: Model<F>, settings: &TrainSettings) -> Result<Self> {
        let alpha = model.architecture_params();
        if alpha.is_empty() {
            return Err(Error::Config("cell search needs a network of mixed cells".into()));
        }
        let weight_opt = settings.weights.build(model.weight_params(), &model);
        let alpha_opt = settings.alpha.build(alpha, &model);
        let state = SearchState {
            model,
            weight_opt,
            alpha_opt,
            log: Vec::new(),
        };
        state.check_partition()?;
        Ok(state)
    }

    /// The two optimizers own disjoint parameter sets covering the store.
    pub fn check_partition(&self) -> Result<()> {
        let all: Vec<ParamId> = self.model.store().ids().collect();
        for &id in &all {
            let owners = self.weight_opt.owns(id) as usize + self.alpha_opt.owns(id) as usize;
            if owners != 1 {
                return Err(Error::Config(format!(
                    "parameter `{}` is owned by {owners} optimizers",
                    self.model.store().name(id)
                )));
            }
        }
        Ok(())
    }

    pub fn weight_optimizer(&self) -> &Optimizer<F> {
        &self.weight_opt
    }

    pub fn alpha_optimizer(&self) -> &Optimizer<F> {
        &self.alpha_opt
    }

    /// Every optimizer step taken so far.
    pub fn step_log(&self) -> &[StepKind] {
        &self.log
    }

    pub fn alpha_table(&self) -> AlphaTable {
        self.model.alpha_table().expect("search networks carry alpha")
    }

    fn gradient_step(&mut self, group: ParamGroup, images: &Tensor<F>, labels: &[usize]) -> Result<f64> {
        let (net, store) = self.model.parts_mut();
        store.zero_grad();
        let mut tape = Tape::new();
        let bind = tape.bind_params(store, |g| g == group);
        let x = tape.constant(images.clone());
        let loss = net.loss(&mut tape, &bind, x, labels)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        tape.backward(loss)?.accumulate_into(store);
        let opt = match group {
            ParamGroup::Architecture => &mut self.alpha_opt,
            ParamGroup::Weights => &mut self.weight_opt,
        };
        opt.step(store)?;
        store.zero_grad();
        self.log.push(match group {
            ParamGroup::Architecture => StepKind::Architecture,
            ParamGroup::Weights => StepKind::Weights,
        });
        Ok(value)
    }

    /// One architecture step on the validation batch with the weights held
    /// fixed, then one weight step on the training batch with alpha held
    /// fixed.
    pub fn search_step(&mut self, train: (&Tensor<F>, &[usize]), val: (&Tensor<F>, &[usize])) -> Result<StepLosses> {
        if train.1.is_empty() || val.1.is_empty() {
            return Err(Error::Data("search step needs non-empty batches".into()));
        }
        let val_loss = self.gradient_step(ParamGroup::Architecture, val.0, val.1)?;
        let train_loss = self.gradient_step(ParamGroup::Weights, train.0, train.1)?;
        Ok(StepLosses { val_loss, train_loss })
    }
}

/// One weight-only training step.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut Optimizer<F>,
    images: &Tensor<F>,
    labels: &[usize],
) -> Result<f64> {
    let (net, store) = model.parts_mut();
    store.zero_grad();
    let mut tape = Tape::new();
    let bind = tape.bind_params(store, |g| g == ParamGroup::Weights);
    let x = tape.constant(images.clone());
    let loss = net.loss(&mut tape, &bind, x, labels)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    tape.backward(loss)?.accumulate_into(store);
    opt.step(store)?;
    store.zero_grad();
    Ok(value)
}

/// Mean loss and accuracy over `indices`, without augmentation.
pub fn evaluate_split<F: Scalar>(
    model: &Model<F>,
    data: &Dataset,
    indices: &[usize],
    stats: &NormStats,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut acc = Accuracy::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = make_batch::<F>(data, chunk, stats, Pipeline::Eval)?;
        let mut tape = Tape::new();
        let bind = tape.bind_params(model.store(), |_| false);
        let v = tape.constant(x);
        let logits = model.forward(&mut tape, &bind, v)?;
        acc.add(tape.value(logits), &labels)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        total += tape.value(loss).item().as_f64() * chunk.len() as f64;
    }
    Ok((total / indices.len() as f64, acc.value()?))
}

/// Accuracy over a whole dataset, without augmentation.
pub fn evaluate_dataset<F: Scalar>(
    model: &Model<F>,
    data: &Dataset,
    stats: &NormStats,
    batch_size: usize,
) -> Result<f64> {
    let batches = sequential_batches(data.len(), batch_size)
        .into_iter()
        .map(|idx| make_batch::<F>(data, &idx, stats, Pipeline::Eval));
    model.evaluate(batches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha_entropy: f64,
}

pub struct SearchOutcome<F: Scalar> {
    pub genotype: Genotype,
    /// Alpha of the epoch with the lowest validation loss.
    pub alpha: AlphaTable,
    pub report: Vec<SearchEpoch>,
    pub state: SearchState<F>,
}

fn map_indices(base: &[usize], batch: &[usize]) -> Vec<usize> {
    batch.iter().map(|&i| base[i]).collect()
}

/// Searches a cell on `train`, split into a weight part and an architecture
/// part. Stops early on the architecture-part loss.
pub fn run_search<F: Scalar>(
    train: &Dataset,
    network: NetworkConfig,
    settings: &TrainSettings,
    split: SplitMode,
) -> Result<SearchOutcome<F>> {
    settings.validate()?;
    if !matches!(network.renet[0].cell, CellKind::Mixed { .. }) {
        return Err(Error::Config("cell search needs mixed cells".into()));
    }
    let parts = make_splits(train.len(), split, settings.derived_seed(1))?;
    let (train_cs, val_cs) = match split {
        SplitMode::Search { .. } => (parts.first, parts.second),
        SplitMode::Retrain { .. } => (parts.second, parts.first),
    };
    let stats = NormStats::compute(train)?;
    let model = Model::<F>::build(network, settings.seed)?;
    let mut state = SearchState::new(model, settings)?;
    let alpha_id = state.model.alpha().expect("mixed network");

    let mut report = Vec::new();
    let mut best: Option<(f64, Tensor<F>)> = None;
    let mut since_best = 0;
    for epoch in 0..settings.max_epochs {
        let train_batches = shuffled_batches(train_cs.len(), settings.batch_size, settings.derived_seed(2), epoch);
        let val_batches = shuffled_batches(val_cs.len(), settings.batch_size, settings.derived_seed(3), epoch);
        let steps = settings
            .max_batches_per_epoch
            .map_or(train_batches.len(), |m| m.min(train_batches.len()));
        let pipeline = Pipeline::Train {
            augment: settings.augment,
            seed: settings.derived_seed(4),
            epoch,
        };
        let mut train_loss = 0.0;
        for k in 0..steps {
            let t = make_batch::<F>(train, &map_indices(&train_cs, &train_batches[k]), &stats, pipeline)?;
            let v = make_batch::<F>(
                train,
                &map_indices(&val_cs, &val_batches[k % val_batches.len()]),
                &stats,
                Pipeline::Eval,
            )?;
            train_loss += state.search_step((&t.0, &t.1), (&v.0, &v.1))?.train_loss;
        }
        let (val_loss, _) = evaluate_split(&state.model, train, &val_cs, &stats, settings.eval_batch_size)?;
        report.push(SearchEpoch {
            epoch: epoch + 1,
            train_loss: train_loss / steps as f64,
            val_loss,
            alpha_entropy: state.alpha_table().entropy(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, state.model.store().value(alpha_id).clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > settings.patience {
                break;
            }
        }
    }
    let (_, best_alpha) = best.expect("at least one epoch ran");
    let alpha = AlphaTable::from_tensor(&best_alpha)?;
    Ok(SearchOutcome {
        genotype: alpha.derive_genotype(),
        alpha,
        report,
        state,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub struct RetrainOutcome<F: Scalar> {
    /// Weights of the epoch with the best validation accuracy.
    pub model: Model<F>,
    pub stats: NormStats,
    pub report: Vec<RetrainEpoch>,
    pub best_val_acc: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains a freshly initialized network on `train`, holding out part of it
/// for early stopping on validation accuracy, and scores `test`.
pub fn retrain<F: Scalar>(
    train: &Dataset,
    test: Option<&Dataset>,
    network: NetworkConfig,
    settings: &TrainSettings,
    split: SplitMode,
) -> Result<RetrainOutcome<F>> {
    settings.validate()?;
    if matches!(network.renet[0].cell, CellKind::Mixed { .. }) {
        return Err(Error::Config("retraining needs a discrete cell".into()));
    }
    let parts = make_splits(train.len(), split, settings.derived_seed(1))?;
    let (fit, val) = (parts.first, parts.second);
    let stats = NormStats::compute(train)?;
    let mut model = Model::<F>::build(network, settings.seed)?;
    let mut opt = settings.weights.build(model.weight_params(), &model);
    let weights = model.weight_params();

    let mut report = Vec::new();
    let mut best: Option<(f64, Vec<Tensor<F>>)> = None;
    let mut since_best = 0;
    for epoch in 0..settings.max_epochs {
        let batches = shuffled_batches(fit.len(), settings.batch_size, settings.derived_seed(2), epoch);
        let steps = settings
            .max_batches_per_epoch
            .map_or(batches.len(), |m| m.min(batches.len()));
        let pipeline = Pipeline::Train {
            augment: settings.augment,
            seed: settings.derived_seed(4),
            epoch,
        };
        let mut train_loss = 0.0;
        for batch in &batches[..steps] {
            let (x, y) = make_batch::<F>(train, &map_indices(&fit, batch), &stats, pipeline)?;
            train_loss += train_step(&mut model, &mut opt, &x, &y)?;
        }
        let (val_loss, val_acc) = evaluate_split(&model, train, &val, &stats, settings.eval_batch_size)?;
        report.push(RetrainEpoch {
            epoch: epoch + 1,
            train_loss: train_loss / steps as f64,
            val_loss,
            val_acc,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, model.store().snapshot(&weights)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > settings.patience {
                break;
            }
        }
    }
    let (best_val_acc, snapshot) = best.expect("at least one epoch ran");
    model.store_mut().restore(&weights, &snapshot);
    let test_accuracy = test
        .map(|t| evaluate_dataset(&model, t, &stats, settings.eval_batch_size))
        .transpose()?;
    Ok(RetrainOutcome {
        model,
        stats,
        report,
        best_val_acc,
        test_accuracy,
    })
}

/// Most common `(predecessor, activation)` of one vertex over several
/// searches.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexAgreement {
    pub vertex: usize,
    pub modal: GenotypeEntry,
    /// Fraction of searches that chose `modal`.
    pub agreement: f64,
}

/// Per-vertex agreement of genotypes with equal vertex counts. Ties between
/// choices go to the one seen first.
pub fn agreement(genotypes: &[Genotype]) -> Result<Vec<VertexAgreement>> {
    let Some(first) = genotypes.first() else {
        return Err(Error::Config("agreement needs at least one genotype".into()));
    };
    let n = first.num_vertices();
    if genotypes.iter().any(|g| g.num_vertices() != n) {
        return Err(Error::Config("genotypes differ in vertex count".into()));
    }
    Ok((1..=n)
        .map(|v| {
            let mut counts: Vec<(GenotypeEntry, usize)> = Vec::new();
            let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
            for g in genotypes {
                let e = g.entry(v);
                let key = (e.pred, e.act.index());
                match seen.get(&key) {
                    Some(&k) => counts[k].1 += 1,
                    None => {
                        seen.insert(key, counts.len());
                        counts.push((e, 1));
                    }
                }
            }
            let (modal, count) = counts
                .iter()
                .fold(counts[0], |best, &c| if c.1 > best.1 { c } else { best });
            VertexAgreement {
                vertex: v,
                modal,
                agreement: count as f64 / genotypes.len() as f64,
            }
        })
        .collect())
}

pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub genotypes: Vec<Genotype>,
    pub agreement: Vec<VertexAgreement>,
}

/// Independent searches, one per seed.
pub fn multi_seed_search<F: Scalar>(
    train: &Dataset,
    network: &NetworkConfig,
    settings: &TrainSettings,
    split: SplitMode,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Config("multi-seed search needs at least one seed".into()));
    }
    let mut genotypes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let s = TrainSettings {
            seed,
            ..settings.clone()
        };
        genotypes.push(run_search::<F>(train, network.clone(), &s, split)?.genotype);
    }
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        agreement: agreement(&genotypes)?,
        genotypes,
    })
}

pub fn search_report_csv(rows: &[SearchEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,alpha_entropy\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.alpha_entropy).expect("write to string");
    }
    out
}

pub fn retrain_report_csv(rows: &[RetrainEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc).expect("write to string");
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
