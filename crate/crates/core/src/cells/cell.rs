use rand::Rng;

use super::alpha::edge_index;
use super::Genotype;
use crate::error::{Error, Result};
use crate::numerics::{
    scaled_uniform, Activation, Bindings, Init, ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};

/// Which state of predecessor `j` a vertex `i > 0` reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PredecessorTiming {
    /// `h_{j,t}`, computed earlier in the same step.
    #[default]
    CurrentStep,
    /// `h_{j,t-1}`, from the previous step.
    PreviousStep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellKind {
    Genotype(Genotype),
    /// Continuous relaxation over every predecessor and activation; needs
    /// [`MixWeights`] at each step.
    Mixed {
        num_vertices: usize,
    },
    Gru,
    Lstm,
}

impl CellKind {
    /// Number of non-input vertices of a DAG cell.
    pub fn num_vertices(&self) -> Option<usize> {
        match self {
            CellKind::Genotype(g) => Some(g.num_vertices()),
            CellKind::Mixed { num_vertices } => Some(*num_vertices),
            CellKind::Gru | CellKind::Lstm => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub timing: PredecessorTiming,
    pub init: Init,
}

impl CellSpec {
    pub fn new(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Self {
        CellSpec {
            kind,
            input_dim,
            hidden_dim,
            timing: PredecessorTiming::default(),
            init: Init::default(),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

/// Parameter handles of one registered cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellParams {
    /// One `W_i` and bias per vertex, vertex 0 first.
    Dag {
        weights: Vec<ParamId>,
        biases: Vec<ParamId>,
    },
    /// GRU (gates `r, z, n`) or LSTM (gates `i, f, g, o`), input and
    /// recurrent paths with separate biases.
    Gated {
        input: ParamId,
        recurrent: ParamId,
        input_bias: ParamId,
        recurrent_bias: ParamId,
    },
}

impl CellParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            CellParams::Dag { weights, biases } => weights.iter().chain(biases).copied().collect(),
            CellParams::Gated {
                input,
                recurrent,
                input_bias,
                recurrent_bias,
            } => vec![*input, *recurrent, *input_bias, *recurrent_bias],
        }
    }
}

/// Recurrent state carried between steps.
///
/// DAG cells keep one `batch x hidden` state per vertex (vertex 0 first);
/// GRU keeps `[h]`, LSTM keeps `[h, c]`. `output` is what the cell emits.
#[derive(Clone, Debug)]
pub struct CellState {
    pub vertices: Vec<Var>,
    pub output: Var,
}

/// Per-step intermediate values of one vertex.
#[derive(Clone, Copy, Debug)]
pub struct VertexOutput {
    pub gate: Var,
    pub candidate: Var,
    pub state: Var,
}

/// Softmax-normalized candidate weights of every vertex of a mixed cell,
/// computed once per forward pass from the shared alpha parameter.
#[derive(Clone, Debug)]
pub struct MixWeights {
    vertices: Vec<Var>,
}

impl MixWeights {
    /// `alpha` is the `edges x 4` table; vertex `i` gets a length-`4i`
    /// distribution ordered by predecessor, then activation.
    pub fn new<F: Scalar>(tape: &mut Tape<F>, alpha: Var, num_vertices: usize) -> Result<Self> {
        let vertices = (1..=num_vertices)
            .map(|i| {
                let rows = tape.slice_rows(alpha, edge_index(0, i), i)?;
                let flat = tape.reshape(rows, &[4 * i])?;
                tape.softmax(flat, 0)
            })
            .collect::<Result<_>>()?;
        Ok(MixWeights { vertices })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex(&self, vertex: usize) -> Var {
        self.vertices[vertex - 1]
    }
}

/// One vertex update from unfused primitives: `z = x_in W + b`,
/// `c = sigmoid(z[:h])`, `h~ = act(z[h:])`, `h = (1 - c) h_prev + c h~`.
pub fn vertex_step<F: Scalar>(
    tape: &mut Tape<F>,
    x_in: Var,
    h_prev: Var,
    weight: Var,
    bias: Var,
    act: Activation,
) -> Result<VertexOutput> {
    let hidden = tape.shape(h_prev).get(1).copied().unwrap_or(0);
    let z = tape.matmul(x_in, weight)?;
    let z = tape.add_bias(z, bias)?;
    if tape.shape(z)[1] != 2 * hidden {
        return Err(Error::Shape {
            op: "vertex_step",
            detail: format!("weight yields {} columns for hidden size {hidden}", tape.shape(z)[1]),
        });
    }
    let gate = tape.slice_cols(z, 0, hidden)?;
    let gate = tape.sigmoid(gate)?;
    let candidate = tape.slice_cols(z, hidden, hidden)?;
    let candidate = tape.activate(candidate, act)?;
    let state = tape.blend(gate, h_prev, candidate)?;
    Ok(VertexOutput { gate, candidate, state })
}

/// A registered recurrent cell: its structure plus parameter handles.
/// Cloning a cell shares its parameters.
#[derive(Clone, Debug)]
pub struct Cell {
    spec: CellSpec,
    params: CellParams,
}

impl Cell {
    /// Registers fresh parameters named `<prefix>.*` in `store`.
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        spec: CellSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (i, h) = (spec.input_dim, spec.hidden_dim);
        if i == 0 || h == 0 {
            return Err(Error::Config(format!(
                "cell {prefix}: input and hidden sizes must be positive"
            )));
        }
        let gain = match spec.kind {
            CellKind::Gru | CellKind::Lstm => 1.0,
            _ => spec.init.dag_gain(),
        };
        let mut add = |name: String, rows: usize, cols: usize, rng: &mut R| {
            let value = if rows == 0 {
                Tensor::zeros(&[cols])
            } else {
                scaled_uniform(&[rows, cols], rows, gain, rng)
            };
            store.add(name, value, ParamGroup::Weights)
        };
        let params = match spec.kind.num_vertices() {
            Some(0) => return Err(Error::Config(format!("cell {prefix}: no vertices"))),
            Some(n) => {
                let weights = (0..=n)
                    .map(|v| add(format!("{prefix}.w{v}"), if v == 0 { i + h } else { h }, 2 * h, rng))
                    .collect();
                let biases = (0..=n).map(|v| add(format!("{prefix}.b{v}"), 0, 2 * h, rng)).collect();
                CellParams::Dag { weights, biases }
            }
            None => {
                let gates = if spec.kind == CellKind::Gru { 3 } else { 4 };
                CellParams::Gated {
                    input: add(format!("{prefix}.w_ih"), i, gates * h, rng),
                    recurrent: add(format!("{prefix}.w_hh"), h, gates * h, rng),
                    input_bias: add(format!("{prefix}.b_ih"), 0, gates * h, rng),
                    recurrent_bias: add(format!("{prefix}.b_hh"), 0, gates * h, rng),
                }
            }
        };
        Ok(Cell { spec, params })
    }

    /// Same parameters, different predecessor timing.
    pub fn with_timing(mut self, timing: PredecessorTiming) -> Self {
        self.spec.timing = timing;
        self
    }

    /// The discrete cell `genotype` over this DAG cell's parameters.
    pub fn discretized(&self, genotype: Genotype) -> Result<Self> {
        if self.spec.kind.num_vertices() != Some(genotype.num_vertices()) {
            return Err(Error::InvalidGenotype(format!(
                "{} vertices do not fit a {:?} cell",
                genotype.num_vertices(),
                self.spec.kind
            )));
        }
        let mut cell = self.clone();
        cell.spec.kind = CellKind::Genotype(genotype);
        Ok(cell)
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn params(&self) -> &CellParams {
        &self.params
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn zero_state<F: Scalar>(&self, tape: &mut Tape<F>, batch: usize) -> CellState {
        let count = match self.spec.kind {
            CellKind::Gru => 1,
            CellKind::Lstm => 2,
            _ => self.spec.kind.num_vertices().unwrap_or(0) + 1,
        };
        let zeros = || Tensor::zeros(&[batch, self.spec.hidden_dim]);
        let vertices: Vec<Var> = (0..count).map(|_| tape.constant(zeros())).collect();
        let output = match self.spec.kind {
            CellKind::Gru | CellKind::Lstm => vertices[0],
            _ => tape.constant(zeros()),
        };
        CellState { vertices, output }
    }

    /// Advances every row of `x` (`batch x input_dim`) by one step.
    pub fn step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        mix: Option<&MixWeights>,
        x: Var,
        state: &CellState,
    ) -> Result<CellState> {
        match (&self.spec.kind, &self.params) {
            (CellKind::Gru, CellParams::Gated { .. }) => self.gru_step(tape, bind, x, state),
            (CellKind::Lstm, CellParams::Gated { .. }) => self.lstm_step(tape, bind, x, state),
            (_, CellParams::Dag { weights, biases }) => {
                let w: Vec<Var> = weights.iter().map(|&id| bind[id]).collect();
                let b: Vec<Var> = biases.iter().map(|&id| bind[id]).collect();
                self.dag_step(tape, &w, &b, mix, x, state)
            }
            _ => unreachable!("parameters registered for the cell kind"),
        }
    }

    /// Like [`Cell::step`] for genotype cells, built from [`vertex_step`] so
    /// gates and candidates of every vertex are exposed.
    pub fn step_traced<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        x: Var,
        state: &CellState,
    ) -> Result<(CellState, Vec<VertexOutput>)> {
        let (CellKind::Genotype(g), CellParams::Dag { weights, biases }) = (&self.spec.kind, &self.params) else {
            return Err(Error::Config("tracing is available for genotype cells only".into()));
        };
        let x0 = tape.concat_cols(&[x, state.vertices[0]])?;
        let mut trace = vec![vertex_step(
            tape,
            x0,
            state.vertices[0],
            bind[weights[0]],
            bind[biases[0]],
            Genotype::INPUT_ACTIVATION,
        )?];
        for i in 1..=g.num_vertices() {
            let e = g.entry(i);
            let input = match self.spec.timing {
                PredecessorTiming::CurrentStep => trace[e.pred].state,
                PredecessorTiming::PreviousStep => state.vertices[e.pred],
            };
            let out = vertex_step(tape, input, state.vertices[i], bind[weights[i]], bind[biases[i]], e.act)?;
            trace.push(out);
        }
        let vertices: Vec<Var> = trace.iter().map(|v| v.state).collect();
        let output = tape.mean_of(&vertices[1..])?;
        Ok((CellState { vertices, output }, trace))
    }

    fn dag_step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        w: &[Var],
        b: &[Var],
        mix: Option<&MixWeights>,
        x: Var,
        state: &CellState,
    ) -> Result<CellState> {
        let batch = tape.shape(x)[0];
        let x0 = tape.concat_cols(&[x, state.vertices[0]])?;
        let z0 = tape.matmul(x0, w[0])?;
        let z0 = tape.add_bias(z0, b[0])?;
        let mut vertices = vec![tape.gated_update(z0, state.vertices[0], Genotype::INPUT_ACTIVATION)?];

        let n = w.len() - 1;
        for i in 1..=n {
            let source = |vertices: &[Var], j: usize| match self.spec.timing {
                PredecessorTiming::CurrentStep => vertices[j],
                PredecessorTiming::PreviousStep => state.vertices[j],
            };
            let prev = state.vertices[i];
            let h = match &self.spec.kind {
                CellKind::Genotype(g) => {
                    let e = g.entry(i);
                    let z = tape.matmul(source(&vertices, e.pred), w[i])?;
                    let z = tape.add_bias(z, b[i])?;
                    tape.gated_update(z, prev, e.act)?
                }
                CellKind::Mixed { .. } => {
                    let Some(mix) = mix else {
                        return Err(Error::Config("mixed cell stepped without mixing weights".into()));
                    };
                    let inputs: Vec<Var> = (0..i).map(|j| source(&vertices, j)).collect();
                    let stacked = tape.concat_rows(&inputs)?;
                    let z_all = tape.matmul(stacked, w[i])?;
                    let z_all = tape.add_bias(z_all, b[i])?;
                    let mut terms = Vec::with_capacity(4 * i);
                    for j in 0..i {
                        let z = tape.slice_rows(z_all, j * batch, batch)?;
                        for act in Activation::ALL {
                            terms.push(tape.gated_update(z, prev, act)?);
                        }
                    }
                    tape.weighted_sum(mix.vertex(i), &terms)?
                }
                CellKind::Gru | CellKind::Lstm => unreachable!(),
            };
            vertices.push(h);
        }
        let output = tape.mean_of(&vertices[1..])?;
        Ok(CellState { vertices, output })
    }

    fn gated_preactivations<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        x: Var,
        h: Var,
    ) -> Result<(Var, Var)> {
        let CellParams::Gated {
            input,
            recurrent,
            input_bias,
            recurrent_bias,
        } = self.params
        else {
            unreachable!("gated cell parameters")
        };
        let gi = tape.matmul(x, bind[input])?;
        let gi = tape.add_bias(gi, bind[input_bias])?;
        let gh = tape.matmul(h, bind[recurrent])?;
        let gh = tape.add_bias(gh, bind[recurrent_bias])?;
        Ok((gi, gh))
    }

    fn gru_step<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Bindings, x: Var, state: &CellState) -> Result<CellState> {
        let hd = self.spec.hidden_dim;
        let h = state.vertices[0];
        let (gi, gh) = self.gated_preactivations(tape, bind, x, h)?;
        let gate = |k: usize, tape: &mut Tape<F>| -> Result<Var> {
            let a = tape.slice_cols(gi, k * hd, hd)?;
            let b = tape.slice_cols(gh, k * hd, hd)?;
            let s = tape.add(a, b)?;
            tape.sigmoid(s)
        };
        let r = gate(0, tape)?;
        let z = gate(1, tape)?;
        let ni = tape.slice_cols(gi, 2 * hd, hd)?;
        let nh = tape.slice_cols(gh, 2 * hd, hd)?;
        let nh = tape.mul(r, nh)?;
        let n = tape.add(ni, nh)?;
        let n = tape.tanh(n)?;
        let h_new = tape.blend(z, n, h)?;
        Ok(CellState {
            vertices: vec![h_new],
            output: h_new,
        })
    }

    fn lstm_step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        x: Var,
        state: &CellState,
    ) -> Result<CellState> {
        let hd = self.spec.hidden_dim;
        let (h, c) = (state.vertices[0], state.vertices[1]);
        let (gi, gh) = self.gated_preactivations(tape, bind, x, h)?;
        let g = tape.add(gi, gh)?;
        let part = |k: usize, act: Activation, tape: &mut Tape<F>| -> Result<Var> {
            let s = tape.slice_cols(g, k * hd, hd)?;
            tape.activate(s, act)
        };
        let i = part(0, Activation::Sigmoid, tape)?;
        let f = part(1, Activation::Sigmoid, tape)?;
        let u = part(2, Activation::Tanh, tape)?;
        let o = part(3, Activation::Sigmoid, tape)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, u)?;
        let c_new = tape.add(keep, write)?;
        let squashed = tape.tanh(c_new)?;
        let h_new = tape.mul(o, squashed)?;
        Ok(CellState {
            vertices: vec![h_new, c_new],
            output: h_new,
        })
    }
}
