use rand::Rng;

use super::{Genotype, GenotypeEntry};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Scalar, Tensor};

const NUM_ACTS: usize = Activation::ALL.len();

/// Architecture logits for every `(predecessor j, vertex i, activation f)`
/// with `0 <= j < i <= num_vertices`.
///
/// Stored as an `edges x 4` row-major matrix; edge `(j, i)` is row
/// `i (i - 1) / 2 + j`, so the candidates of one vertex occupy a contiguous
/// block ordered by predecessor, then activation.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTable {
    num_vertices: usize,
    values: Vec<f64>,
}

pub fn num_edges(num_vertices: usize) -> usize {
    num_vertices * (num_vertices + 1) / 2
}

pub fn edge_index(pred: usize, vertex: usize) -> usize {
    debug_assert!(pred < vertex);
    vertex * (vertex - 1) / 2 + pred
}

impl AlphaTable {
    pub fn zeros(num_vertices: usize) -> Self {
        AlphaTable {
            num_vertices,
            values: vec![0.0; num_edges(num_vertices) * NUM_ACTS],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(num_vertices: usize, bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(num_vertices);
        for v in &mut t.values {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    /// Table with `magnitude` on each vertex's genotype entry and zeros
    /// elsewhere.
    pub fn saturated(genotype: &Genotype, magnitude: f64) -> Self {
        let mut t = Self::zeros(genotype.num_vertices());
        for (k, e) in genotype.entries().iter().enumerate() {
            t.set(e.pred, k + 1, e.act, magnitude);
        }
        t
    }

    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        let Some((rows, cols)) = t.dims2() else {
            return Err(Error::InvalidAlpha(format!("expected a matrix, got {:?}", t.shape())));
        };
        if cols != NUM_ACTS {
            return Err(Error::InvalidAlpha(format!("expected {NUM_ACTS} columns, got {cols}")));
        }
        let n = (0..=rows).find(|&n| num_edges(n) == rows).filter(|&n| n > 0);
        let Some(num_vertices) = n else {
            return Err(Error::InvalidAlpha(format!("{rows} rows is not a complete edge set")));
        };
        if !t.is_finite() {
            return Err(Error::InvalidAlpha("non-finite entry".into()));
        }
        Ok(AlphaTable {
            num_vertices,
            values: t.to_f64_vec(),
        })
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_f64(&[num_edges(self.num_vertices), NUM_ACTS], &self.values).expect("table shape")
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, pred: usize, vertex: usize, act: Activation) -> f64 {
        self.values[edge_index(pred, vertex) * NUM_ACTS + act.index()]
    }

    pub fn set(&mut self, pred: usize, vertex: usize, act: Activation, value: f64) {
        self.values[edge_index(pred, vertex) * NUM_ACTS + act.index()] = value;
    }

    /// The `4 * vertex` logits of `vertex`, predecessor-major.
    pub fn vertex_logits(&self, vertex: usize) -> &[f64] {
        let start = edge_index(0, vertex) * NUM_ACTS;
        &self.values[start..start + vertex * NUM_ACTS]
    }

    /// Joint softmax over the `(predecessor, activation)` candidates of `vertex`.
    pub fn vertex_weights(&self, vertex: usize) -> Vec<f64> {
        let logits = self.vertex_logits(vertex);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    /// Strongest predecessor by its best activation logit, then that
    /// predecessor's best activation. Ties resolve to the lowest index.
    pub fn derive_genotype(&self) -> Genotype {
        let entries = (1..=self.num_vertices)
            .map(|i| {
                let best_act = |j: usize| {
                    let mut best = Activation::ALL[0];
                    for &f in &Activation::ALL[1..] {
                        if self.get(j, i, f) > self.get(j, i, best) {
                            best = f;
                        }
                    }
                    best
                };
                let mut pred = 0;
                for j in 1..i {
                    if self.get(j, i, best_act(j)) > self.get(pred, i, best_act(pred)) {
                        pred = j;
                    }
                }
                GenotypeEntry::new(pred, best_act(pred))
            })
            .collect();
        Genotype::new(entries).expect("derived predecessors precede their vertex")
    }

    /// Mean over vertices of the entropy (nats) of each vertex's joint
    /// candidate distribution.
    pub fn entropy(&self) -> f64 {
        let total: f64 = (1..=self.num_vertices)
            .map(|i| {
                -self
                    .vertex_weights(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.num_vertices as f64
    }
}
