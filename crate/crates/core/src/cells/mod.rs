//! Recurrent cells: searched DAG cells, their continuous relaxation, and
//! GRU/LSTM baselines.

mod alpha;
mod cell;
mod genotype;

pub use crate::numerics::Activation;
pub use alpha::{edge_index, num_edges, AlphaTable};
pub use cell::{
    vertex_step, Cell, CellKind, CellParams, CellSpec, CellState, MixWeights, PredecessorTiming, VertexOutput,
};
pub use genotype::{Genotype, GenotypeEntry, Preset};

#[cfg(test)]
mod tests;
