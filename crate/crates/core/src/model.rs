//! The classification network: convolutional stem, three ReNet layers and a
//! two-layer fully connected head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{AlphaTable, CellKind, MixWeights, PredecessorTiming};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_params, save_params};
use crate::numerics::{
    scaled_uniform, Bindings, Conv2dGeometry, Init, ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};
use crate::renet::{ReNetLayer, ReNetLayerConfig, Variant};

pub const NUM_STEM_LAYERS: usize = 3;
pub const NUM_RENET_LAYERS: usize = 3;
pub const ALPHA_NAME: &str = "alpha";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(out_channels: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub stem: Vec<ConvSpec>,
    pub renet: Vec<ReNetLayerConfig>,
    pub head_hidden: usize,
    pub num_classes: usize,
    /// Bound of the uniform alpha initialization for mixed cells.
    pub alpha_init: f64,
    pub init: Init,
}

impl NetworkConfig {
    /// 32x32 RGB input, 64-channel stem, hidden size 256, 1024-wide head,
    /// ten classes.
    pub fn new(cell: CellKind, variant: Variant) -> Self {
        Self::with_sizes(cell, variant, 64, 256, 1024)
    }

    pub fn with_sizes(
        cell: CellKind,
        variant: Variant,
        stem_channels: usize,
        hidden: usize,
        head_hidden: usize,
    ) -> Self {
        NetworkConfig {
            input: (3, 32, 32),
            stem: vec![ConvSpec::same(stem_channels); NUM_STEM_LAYERS],
            renet: vec![ReNetLayerConfig::new(2, hidden, variant, cell); NUM_RENET_LAYERS],
            head_hidden,
            num_classes: 10,
            alpha_init: 1e-3,
            init: Init::default(),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        for r in &mut self.renet {
            r.init = init;
        }
        self
    }

    pub fn with_timing(mut self, timing: PredecessorTiming) -> Self {
        for r in &mut self.renet {
            r.timing = timing;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stem.len() != NUM_STEM_LAYERS {
            return fail(format!(
                "expected {NUM_STEM_LAYERS} stem convolutions, got {}",
                self.stem.len()
            ));
        }
        if self.renet.len() != NUM_RENET_LAYERS {
            return fail(format!(
                "expected {NUM_RENET_LAYERS} ReNet layers, got {}",
                self.renet.len()
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.head_hidden == 0 {
            return fail("head width must be positive".into());
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return fail(format!("input shape {:?} has an empty extent", self.input));
        }
        for s in &self.stem {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return fail(format!("invalid convolution {s:?}"));
            }
        }
        let mixed: Vec<_> = self
            .renet
            .iter()
            .filter(|r| matches!(r.cell, CellKind::Mixed { .. }))
            .collect();
        if !mixed.is_empty() && (mixed.len() != self.renet.len() || mixed.iter().any(|r| r.cell != self.renet[0].cell))
        {
            return fail("mixed cells must be used by every layer with one vertex count".into());
        }
        for r in &self.renet {
            r.validate()?;
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.renet[0].variant
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    geom: Conv2dGeometry,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

/// Per-part parameter counts. Shared tensors are counted once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterReport {
    pub stem: usize,
    /// Recurrent cell parameters of each ReNet layer.
    pub renet: Vec<usize>,
    pub sigmoid_weights: usize,
    pub head: usize,
    pub alpha: usize,
}

impl ParameterReport {
    pub fn rnn(&self) -> usize {
        self.renet.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.stem + self.rnn() + self.sigmoid_weights + self.head + self.alpha
    }

    pub fn total_millions(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

/// Layer structure of a built model: parameter handles, no values.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    stem: Vec<ConvLayer>,
    layers: Vec<ReNetLayer>,
    head: [Dense; 2],
    alpha: Option<ParamId>,
}

pub struct Model<F: Scalar> {
    net: Network,
    store: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    /// Builds the network with freshly initialized parameters.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let alpha = match config.renet[0].cell {
            CellKind::Mixed { num_vertices } => Some(store.add(
                ALPHA_NAME,
                AlphaTable::uniform(num_vertices, config.alpha_init, &mut rng).to_tensor(),
                ParamGroup::Architecture,
            )),
            _ => None,
        };

        let (mut c, mut h, mut w) = config.input;
        let mut stem = Vec::with_capacity(NUM_STEM_LAYERS);
        for (k, s) in config.stem.iter().enumerate() {
            if h + 2 * s.padding < s.kernel || w + 2 * s.padding < s.kernel {
                return Err(Error::Config(format!("stem conv {k} kernel exceeds its {h}x{w} input")));
            }
            let fan_in = c * s.kernel * s.kernel;
            let weight = store.add(
                format!("stem{}.weight", k + 1),
                scaled_uniform(
                    &[s.out_channels, c, s.kernel, s.kernel],
                    fan_in,
                    config.init.dense_gain(),
                    &mut rng,
                ),
                ParamGroup::Weights,
            );
            let bias = store.add(
                format!("stem{}.bias", k + 1),
                Tensor::zeros(&[s.out_channels]),
                ParamGroup::Weights,
            );
            stem.push(ConvLayer {
                weight,
                bias,
                geom: Conv2dGeometry {
                    stride: s.stride,
                    padding: s.padding,
                },
            });
            c = s.out_channels;
            h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
            w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
        }

        let mut layers = Vec::with_capacity(NUM_RENET_LAYERS);
        for (k, rc) in config.renet.iter().enumerate() {
            let layer = ReNetLayer::register(&mut store, &format!("renet{}", k + 1), rc.clone(), (c, h, w), &mut rng)?;
            (c, h, w) = layer.output_shape();
            layers.push(layer);
        }

        let mut dense = |name: &str, inputs: usize, outputs: usize, gain: f64| Dense {
            weight: store.add(
                format!("{name}.weight"),
                scaled_uniform(&[inputs, outputs], inputs, gain, &mut rng),
                ParamGroup::Weights,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), ParamGroup::Weights),
        };
        let head = [
            dense("fc1", c * h * w, config.head_hidden, config.init.dense_gain()),
            dense(
                "fc2",
                config.head_hidden,
                config.num_classes,
                config.init.classifier_gain(),
            ),
        ];
        let net = Network {
            config,
            stem,
            layers,
            head,
            alpha,
        };
        Ok(Model { net, store })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// The structure and the parameters, borrowed separately.
    pub fn parts_mut(&mut self) -> (&Network, &mut ParamStore<F>) {
        (&self.net, &mut self.store)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn layers(&self) -> &[ReNetLayer] {
        &self.net.layers
    }

    /// The architecture parameter of a search network.
    pub fn alpha(&self) -> Option<ParamId> {
        self.net.alpha
    }

    pub fn alpha_table(&self) -> Option<AlphaTable> {
        self.net
            .alpha
            .map(|id| AlphaTable::from_tensor(self.store.value(id)).expect("alpha keeps its shape"))
    }

    pub fn weight_params(&self) -> Vec<ParamId> {
        self.store.ids_in_group(ParamGroup::Weights)
    }

    pub fn architecture_params(&self) -> Vec<ParamId> {
        self.store.ids_in_group(ParamGroup::Architecture)
    }

    pub fn forward(&self, tape: &mut Tape<F>, bind: &Bindings, images: Var) -> Result<Var> {
        self.net.forward(tape, bind, images)
    }

    pub fn loss(&self, tape: &mut Tape<F>, bind: &Bindings, images: Var, labels: &[usize]) -> Result<Var> {
        self.net.loss(tape, bind, images, labels)
    }

    /// Inference-only logits.
    pub fn classify(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bind = tape.bind_params(&self.store, |_| false);
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, &bind, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Accuracy over `(images, labels)` batches, computed in one
    /// deterministic pass.
    pub fn evaluate<I>(&self, batches: I) -> Result<f64>
    where
        I: IntoIterator<Item = Result<(Tensor<F>, Vec<usize>)>>,
    {
        let mut tally = Accuracy::default();
        for batch in batches {
            let (images, labels) = batch?;
            tally.add(&self.classify(&images)?, &labels)?;
        }
        tally.value()
    }

    pub fn count_parameters(&self) -> ParameterReport {
        let size = |id: ParamId| self.store.value(id).len();
        ParameterReport {
            stem: self.net.stem.iter().map(|c| size(c.weight) + size(c.bias)).sum(),
            renet: self
                .net
                .layers
                .iter()
                .map(|l| {
                    let mut ids = Vec::new();
                    for c in [
                        &l.horizontal.forward,
                        &l.horizontal.backward,
                        &l.vertical.forward,
                        &l.vertical.backward,
                    ] {
                        ids.extend(c.params().ids());
                    }
                    ids.sort();
                    ids.dedup();
                    ids.into_iter().map(size).sum()
                })
                .collect(),
            sigmoid_weights: self.net.layers.iter().filter_map(|l| l.sigmoid_weights).map(size).sum(),
            head: self.net.head.iter().map(|d| size(d.weight) + size(d.bias)).sum(),
            alpha: self.net.alpha.map_or(0, size),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(&self.store, path)
    }

    /// Loads parameters saved from a model with the same configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        load_params(&mut self.store, path)
    }
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ReNetLayer] {
        &self.layers
    }

    pub fn alpha(&self) -> Option<ParamId> {
        self.alpha
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        let (c, h, w) = self.config.input;
        match *shape {
            [n, ic, ih, iw] if n > 0 && (ic, ih, iw) == (c, h, w) => Ok(n),
            _ => Err(Error::Shape {
                op: "model",
                detail: format!("expected N x {c} x {h} x {w} images, got {shape:?}"),
            }),
        }
    }

    /// Logits for a batch of images, every intermediate recorded on `tape`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Bindings, images: Var) -> Result<Var> {
        self.forward_traced(tape, bind, images, |_, _| {})
    }

    /// [`Network::forward`], reporting each ReNet layer output (1-based index).
    pub fn forward_traced<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        images: Var,
        mut on_layer: impl FnMut(usize, &[usize]),
    ) -> Result<Var> {
        let n = self.check_images(tape.shape(images))?;
        let mix = match (self.alpha, &self.config.renet[0].cell) {
            (Some(a), CellKind::Mixed { num_vertices }) => Some(MixWeights::new(tape, bind[a], *num_vertices)?),
            _ => None,
        };
        let mut x = images;
        for conv in &self.stem {
            x = tape.conv2d(x, bind[conv.weight], bind[conv.bias], conv.geom)?;
            x = tape.relu(x)?;
        }
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bind, mix.as_ref(), x)?;
            on_layer(k + 1, tape.shape(x));
        }
        let features = tape.value(x).len() / n;
        let x = tape.reshape(x, &[n, features])?;
        let [fc1, fc2] = self.head;
        let x = tape.matmul(x, bind[fc1.weight])?;
        let x = tape.add_bias(x, bind[fc1.bias])?;
        let x = tape.relu(x)?;
        let x = tape.matmul(x, bind[fc2.weight])?;
        tape.add_bias(x, bind[fc2.bias])
    }

    /// Mean cross-entropy of a batch.
    pub fn loss<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Bindings, images: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.forward(tape, bind, images)?;
        tape.cross_entropy(logits, labels)
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Result<Vec<usize>> {
    let Some((_, k)) = logits.dims2() else {
        return Err(Error::Shape {
            op: "argmax",
            detail: format!("expected a matrix, got {:?}", logits.shape()),
        });
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Running count of correct predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn add<F: Scalar>(&mut self, logits: &Tensor<F>, labels: &[usize]) -> Result<()> {
        let predicted = argmax_rows(logits)?;
        if predicted.len() != labels.len() {
            return Err(Error::Shape {
                op: "accuracy",
                detail: format!("{} predictions for {} labels", predicted.len(), labels.len()),
            });
        }
        self.correct += predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        self.total += labels.len();
        Ok(())
    }

    /// Fraction correct; an empty split is an error.
    pub fn value(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        Ok(self.correct as f64 / self.total as f64)
    }
}

/// `(grid height, grid width)` of each ReNet layer output for `config`.
pub fn grid_schedule(config: &NetworkConfig) -> Vec<(usize, usize)> {
    let (_, mut h, mut w) = config.input;
    for s in &config.stem {
        h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
        w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
    }
    config
        .renet
        .iter()
        .map(|r| {
            (h, w) = r.window.grid(h, w);
            (h, w)
        })
        .collect()
}
