//! Straight-line `f64` re-implementations of the cells for one sample at a
//! time, using plain loops and no tape. Tests and `selftest` compare the
//! tape-based cells against these.

use crate::cells::{AlphaTable, Cell, CellParams, Genotype, GenotypeEntry, PredecessorTiming};
use crate::numerics::{Activation, ParamId, ParamStore, Scalar};

#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn from_store<F: Scalar>(store: &ParamStore<F>, id: ParamId) -> Self {
        let t = store.value(id);
        let (rows, cols) = t.dims2().expect("weight matrix");
        Matrix {
            rows,
            cols,
            data: t.to_f64_vec(),
        }
    }

    /// `x^T M + bias`.
    pub fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = bias.to_vec();
        for (r, &xr) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *o += xr * m;
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn act(f: Activation, x: f64) -> f64 {
    match f {
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::ReLU => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Identity => x,
    }
}

#[derive(Clone, Debug)]
pub struct DagWeights {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl DagWeights {
    pub fn from_store<F: Scalar>(store: &ParamStore<F>, cell: &Cell) -> Self {
        let CellParams::Dag { weights, biases } = cell.params() else {
            panic!("not a DAG cell");
        };
        DagWeights {
            weights: weights.iter().map(|&id| Matrix::from_store(store, id)).collect(),
            biases: biases.iter().map(|&id| store.value(id).to_f64_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatedWeights {
    pub input: Matrix,
    pub recurrent: Matrix,
    pub input_bias: Vec<f64>,
    pub recurrent_bias: Vec<f64>,
}

impl GatedWeights {
    pub fn from_store<F: Scalar>(store: &ParamStore<F>, cell: &Cell) -> Self {
        let CellParams::Gated {
            input,
            recurrent,
            input_bias,
            recurrent_bias,
        } = *cell.params()
        else {
            panic!("not a gated cell");
        };
        GatedWeights {
            input: Matrix::from_store(store, input),
            recurrent: Matrix::from_store(store, recurrent),
            input_bias: store.value(input_bias).to_f64_vec(),
            recurrent_bias: store.value(recurrent_bias).to_f64_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VertexTrace {
    pub gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub state: Vec<f64>,
}

fn vertex(w: &Matrix, bias: &[f64], input: &[f64], prev: &[f64], f: Activation) -> VertexTrace {
    let h = prev.len();
    let z = w.affine(input, bias);
    let gate: Vec<f64> = (0..h).map(|k| sigmoid(z[k])).collect();
    let candidate: Vec<f64> = (0..h).map(|k| act(f, z[h + k])).collect();
    let state = (0..h)
        .map(|k| (1.0 - gate[k]) * prev[k] + gate[k] * candidate[k])
        .collect();
    VertexTrace { gate, candidate, state }
}

fn input_vertex(w: &DagWeights, x: &[f64], state: &[Vec<f64>]) -> VertexTrace {
    let mut x0 = x.to_vec();
    x0.extend_from_slice(&state[0]);
    vertex(&w.weights[0], &w.biases[0], &x0, &state[0], Activation::Tanh)
}

fn mean(states: &[Vec<f64>]) -> Vec<f64> {
    let n = states.len() as f64;
    (0..states[0].len())
        .map(|k| states.iter().map(|s| s[k]).sum::<f64>() / n)
        .collect()
}

/// One step of a discrete cell. `state` holds one vector per vertex,
/// vertex 0 first. Returns the cell output and every vertex's trace.
pub fn genotype_step(
    genotype: &Genotype,
    timing: PredecessorTiming,
    w: &DagWeights,
    x: &[f64],
    state: &[Vec<f64>],
) -> (Vec<f64>, Vec<VertexTrace>) {
    let mut trace = vec![input_vertex(w, x, state)];
    for (k, e) in genotype.entries().iter().enumerate() {
        let i = k + 1;
        let input = match timing {
            PredecessorTiming::CurrentStep => trace[e.pred].state.clone(),
            PredecessorTiming::PreviousStep => state[e.pred].clone(),
        };
        trace.push(vertex(&w.weights[i], &w.biases[i], &input, &state[i], e.act));
    }
    let states: Vec<Vec<f64>> = trace[1..].iter().map(|t| t.state.clone()).collect();
    (mean(&states), trace)
}

/// One step of the relaxed cell, evaluating every `(predecessor,
/// activation)` branch of every vertex separately and weighting it by
/// `exp(alpha) / sum exp(alpha)` over that vertex's candidates.
pub fn mixed_step(
    alpha: &AlphaTable,
    timing: PredecessorTiming,
    w: &DagWeights,
    x: &[f64],
    state: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = alpha.num_vertices();
    let mut states = vec![input_vertex(w, x, state).state];
    for i in 1..=n {
        let mut logits = Vec::new();
        let mut branches = Vec::new();
        for j in 0..i {
            let input = match timing {
                PredecessorTiming::CurrentStep => &states[j],
                PredecessorTiming::PreviousStep => &state[j],
            };
            for f in Activation::ALL {
                logits.push(alpha.get(j, i, f));
                branches.push(vertex(&w.weights[i], &w.biases[i], input, &state[i], f).state);
            }
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|a| (a - top).exp()).sum();
        let mut h = vec![0.0; state[i].len()];
        for (a, branch) in logits.iter().zip(&branches) {
            let p = (a - top).exp() / norm;
            for (hk, bk) in h.iter_mut().zip(branch) {
                *hk += p * bk;
            }
        }
        states.push(h);
    }
    (mean(&states[1..]), states)
}

/// GRU step with gate order `r, z, n`: `h' = (1 - z) n + z h`.
pub fn gru_step(w: &GatedWeights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hd = h.len();
    let gi = w.input.affine(x, &w.input_bias);
    let gh = w.recurrent.affine(h, &w.recurrent_bias);
    (0..hd)
        .map(|k| {
            let r = sigmoid(gi[k] + gh[k]);
            let z = sigmoid(gi[hd + k] + gh[hd + k]);
            let n = (gi[2 * hd + k] + r * gh[2 * hd + k]).tanh();
            (1.0 - z) * n + z * h[k]
        })
        .collect()
}

/// LSTM step with gate order `i, f, g, o`. Returns `(h, c)`.
pub fn lstm_step(w: &GatedWeights, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let gi = w.input.affine(x, &w.input_bias);
    let gh = w.recurrent.affine(h, &w.recurrent_bias);
    let g = |k: usize| gi[k] + gh[k];
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for k in 0..hd {
        let i = sigmoid(g(k));
        let f = sigmoid(g(hd + k));
        let u = g(2 * hd + k).tanh();
        let o = sigmoid(g(3 * hd + k));
        c_new[k] = f * c[k] + i * u;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

/// Picks, for every vertex, the `(predecessor, activation)` pair holding the
/// largest logit in one flat scan; the first maximum in predecessor-major
/// order wins.
pub fn derive_genotype(alpha: &AlphaTable) -> Genotype {
    let entries = (1..=alpha.num_vertices())
        .map(|i| {
            let mut best = (0, Activation::ALL[0]);
            for j in 0..i {
                for f in Activation::ALL {
                    if alpha.get(j, i, f) > alpha.get(best.0, i, best.1) {
                        best = (j, f);
                    }
                }
            }
            GenotypeEntry::new(best.0, best.1)
        })
        .collect();
    Genotype::new(entries).expect("valid predecessors")
}
