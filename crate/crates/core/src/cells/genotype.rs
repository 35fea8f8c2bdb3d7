use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Incoming edge of one non-input vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GenotypeEntry {
    pub pred: usize,
    pub act: Activation,
}

impl GenotypeEntry {
    pub fn new(pred: usize, act: Activation) -> Self {
        GenotypeEntry { pred, act }
    }
}

/// Discrete cell: for every vertex `i >= 1`, one predecessor `j < i` and one
/// activation. Vertex 0 reads `[x_t; h_{t-1}]` through [`Genotype::INPUT_ACTIVATION`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    entries: Vec<GenotypeEntry>,
}

fn invalid<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::InvalidGenotype(detail.into()))
}

impl Genotype {
    pub const INPUT_ACTIVATION: Activation = Activation::Tanh;

    /// `entries[i - 1]` describes vertex `i`.
    pub fn new(entries: Vec<GenotypeEntry>) -> Result<Self> {
        if entries.is_empty() {
            return invalid("a cell needs at least one non-input vertex");
        }
        for (k, e) in entries.iter().enumerate() {
            let vertex = k + 1;
            if e.pred >= vertex {
                return invalid(format!(
                    "vertex {vertex} has predecessor {} (must be < {vertex})",
                    e.pred
                ));
            }
        }
        Ok(Genotype { entries })
    }

    /// Each vertex reads its immediate predecessor.
    pub fn chain(acts: &[Activation]) -> Result<Self> {
        Self::new(
            acts.iter()
                .enumerate()
                .map(|(k, &a)| GenotypeEntry::new(k, a))
                .collect(),
        )
    }

    pub fn num_vertices(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[GenotypeEntry] {
        &self.entries
    }

    /// Entry of vertex `vertex` (1-based).
    pub fn entry(&self, vertex: usize) -> GenotypeEntry {
        self.entries[vertex - 1]
    }

    pub fn count(&self, act: Activation) -> usize {
        self.entries.iter().filter(|e| e.act == act).count()
    }

    /// Graphviz rendering: vertex 0 is the cell input, each edge carries
    /// its activation name.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph cell {\n  rankdir=LR;\n");
        s.push_str("  v0 [label=\"x_t,h_{t-1}\", shape=box];\n");
        for i in 1..=self.num_vertices() {
            let _ = writeln!(s, "  v{i} [label=\"{i}\"];");
        }
        for (k, e) in self.entries.iter().enumerate() {
            let _ = writeln!(s, "  v{} -> v{} [label=\"{}\"];", e.pred, k + 1, e.act);
        }
        s.push_str("}\n");
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "vertices={}", self.num_vertices())?;
        for (k, e) in self.entries.iter().enumerate() {
            writeln!(f, "v{} pred={} act={}", k + 1, e.pred, e.act)?;
        }
        Ok(())
    }
}

fn field<'a>(token: Option<&'a str>, key: &str, line_no: usize) -> Result<&'a str> {
    match token.and_then(|t| t.strip_prefix(key)) {
        Some(v) => Ok(v),
        None => invalid(format!("line {line_no}: expected `{key}...`")),
    }
}

fn number(text: &str, line_no: usize) -> Result<usize> {
    text.parse()
        .or_else(|_| invalid(format!("line {line_no}: `{text}` is not a non-negative integer")))
}

impl FromStr for Genotype {
    type Err = Error;

    /// Blank lines and `#` comments are ignored.
    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let Some((n0, header)) = lines.next() else {
            return invalid("empty genotype");
        };
        let count = number(field(Some(header), "vertices=", n0)?, n0)?;

        let mut entries = Vec::with_capacity(count);
        for (line_no, line) in lines {
            let mut tokens = line.split_whitespace();
            let vertex = number(field(tokens.next(), "v", line_no)?, line_no)?;
            if vertex != entries.len() + 1 {
                return invalid(format!(
                    "line {line_no}: expected v{}, found v{vertex}",
                    entries.len() + 1
                ));
            }
            let pred = number(field(tokens.next(), "pred=", line_no)?, line_no)?;
            let name = field(tokens.next(), "act=", line_no)?;
            let act: Activation = name
                .parse()
                .or_else(|_| invalid(format!("line {line_no}: unknown activation `{name}`")))?;
            if tokens.next().is_some() {
                return invalid(format!("line {line_no}: trailing tokens"));
            }
            entries.push(GenotypeEntry::new(pred, act));
        }
        if entries.len() != count {
            return invalid(format!("header declares {count} vertices, found {}", entries.len()));
        }
        Genotype::new(entries)
    }
}

/// The three searched cells shipped with the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Vanilla,
    SigmoidWeighting,
    DirectionalWeightSharing,
}

impl Preset {
    pub const ALL: [Preset; 3] = [
        Preset::Vanilla,
        Preset::SigmoidWeighting,
        Preset::DirectionalWeightSharing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Vanilla => "vanilla",
            Preset::SigmoidWeighting => "sigmoid-weighting",
            Preset::DirectionalWeightSharing => "dws",
        }
    }

    pub fn genotype(self) -> Genotype {
        use Activation::*;
        let e = GenotypeEntry::new;
        let entries = match self {
            Preset::Vanilla => vec![
                e(0, Sigmoid),
                e(1, Sigmoid),
                e(2, ReLU),
                e(3, Sigmoid),
                e(4, ReLU),
                e(5, Identity),
                e(6, Identity),
                e(6, ReLU),
            ],
            Preset::SigmoidWeighting => vec![
                e(0, ReLU),
                e(1, Sigmoid),
                e(2, Identity),
                e(3, Identity),
                e(4, Identity),
                e(4, Identity),
                e(4, Identity),
                e(4, Sigmoid),
            ],
            Preset::DirectionalWeightSharing => {
                return Genotype::chain(&[ReLU, Sigmoid, ReLU, ReLU, ReLU, ReLU, ReLU, Sigmoid])
                    .expect("preset is valid")
            }
        };
        Genotype::new(entries).expect("preset is valid")
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vanilla" => Ok(Preset::Vanilla),
            "sigmoid-weighting" | "sw" => Ok(Preset::SigmoidWeighting),
            "dws" | "directional-weight-sharing" => Ok(Preset::DirectionalWeightSharing),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
