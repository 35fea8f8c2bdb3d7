//! Differentiable computation substrate: tensors, the reverse-mode tape,
//! optimizers and checkpoints.

pub mod activation;
pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use activation::Activation;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Bindings, Conv2dGeometry, Gradients, Tape, Var, PAD_INDEX};
pub use tensor::Tensor;

use rand::Rng;

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn fan_in_uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    scaled_uniform(shape, fan_in, 1.0, rng)
}

/// Uniform `[-gain/sqrt(fan_in), gain/sqrt(fan_in)]` initialization.
pub fn scaled_uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<F> {
    Tensor::uniform(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Weight initialization scheme. Biases start at zero under both.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Init {
    /// Every weight matrix uses [`fan_in_uniform`].
    FanIn,
    /// He-uniform convolutions and hidden dense layer (gain `sqrt(6)`), a
    /// half-gain output layer. DAG cell matrices get twice the He gain, so a ReLU
    /// vertex keeps unit gain through a half-open gate. GRU and LSTM keep
    /// [`fan_in_uniform`].
    #[default]
    Scaled,
}

impl Init {
    pub const ALL: [Init; 2] = [Init::FanIn, Init::Scaled];

    pub fn name(self) -> &'static str {
        match self {
            Init::FanIn => "fan-in",
            Init::Scaled => "scaled",
        }
    }

    /// Gain for convolutions and the hidden dense layer.
    pub fn dense_gain(self) -> f64 {
        match self {
            Init::FanIn => 1.0,
            Init::Scaled => 6f64.sqrt(),
        }
    }

    /// Gain for the output layer.
    pub fn classifier_gain(self) -> f64 {
        match self {
            Init::FanIn => 1.0,
            Init::Scaled => 0.5,
        }
    }

    /// Gain for DAG cell matrices.
    pub fn dag_gain(self) -> f64 {
        match self {
            Init::FanIn => 1.0,
            Init::Scaled => 2.0 * 6f64.sqrt(),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Init {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        Init::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| crate::error::Error::Config(format!("unknown init `{s}` (expected fan-in or scaled)")))
    }
}
