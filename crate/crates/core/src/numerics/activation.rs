use std::fmt;
use std::str::FromStr;

use super::Scalar;
use crate::error::Error;

/// Candidate activation functions of a cell vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Sigmoid,
    Tanh,
    ReLU,
    Identity,
}

impl Activation {
    /// The full candidate set, in the index order used by alpha tables.
    pub const ALL: [Activation; 4] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::ReLU,
        Activation::Identity,
    ];

    pub fn index(self) -> usize {
        match self {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
            Activation::ReLU => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Activation> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "Sigmoid",
            Activation::Tanh => "Tanh",
            Activation::ReLU => "ReLU",
            Activation::Identity => "Identity",
        }
    }

    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::ReLU => x.max(F::zero()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the output value `y = f(x)`.
    #[inline]
    pub fn derivative_from_output<F: Scalar>(self, y: F) -> F {
        match self {
            Activation::Sigmoid => y * (F::one() - y),
            Activation::Tanh => F::one() - y * y,
            Activation::ReLU => {
                if y > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Identity => F::one(),
        }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    // split on sign so exp never overflows
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::ReLU),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::InvalidGenotype(format!("unknown activation `{s}`"))),
        }
    }
}
