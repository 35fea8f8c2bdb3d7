//! ReNet layers: non-overlapping patches swept by bidirectional recurrences,
//! first along rows, then along columns.
//!
//! Feature maps enter and leave a layer as `N x C x H x W` tensors. Inside a
//! sweep, sequences are laid out step-major: the input of step `s` is rows
//! `s * M .. (s + 1) * M` of a `(steps * M) x dim` matrix, one row per
//! independent sequence.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::cells::{Cell, CellKind, CellSpec, CellState, MixWeights, PredecessorTiming};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Bindings, Init, ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var, PAD_INDEX};

/// Patch extent in pixels (or feature-map positions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn square(size: usize) -> Self {
        Window {
            height: size,
            width: size,
        }
    }

    /// Grid extent for an input of `h x w`, after zero-padding the right and
    /// bottom edges up to a multiple of the window.
    pub fn grid(self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.height), w.div_ceil(self.width))
    }

    pub fn patch_dim(self, channels: usize) -> usize {
        channels * self.height * self.width
    }
}

/// Flat `C x H x W` source offset of element `p` of patch `(gy, gx)`, or
/// `None` inside the zero padding. Patches flatten channel first, then row
/// within the patch, then column.
fn patch_source(window: Window, (c_n, h, w): (usize, usize, usize), gy: usize, gx: usize, p: usize) -> Option<usize> {
    let area = window.height * window.width;
    let (c, rest) = (p / area, p % area);
    let (dy, dx) = (rest / window.width, rest % window.width);
    let (y, x) = (gy * window.height + dy, gx * window.width + dx);
    debug_assert!(c < c_n);
    (y < h && x < w).then(|| (c * h + y) * w + x)
}

/// Flattened non-overlapping patches of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<F> {
    pub grid_height: usize,
    pub grid_width: usize,
    /// `(grid_height * grid_width) x patch_dim`, row-major over the grid.
    pub values: Tensor<F>,
}

impl<F: Scalar> PatchGrid<F> {
    pub fn patch_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn patch(&self, gy: usize, gx: usize) -> &[F] {
        let p = self.patch_dim();
        let r = gy * self.grid_width + gx;
        &self.values.data()[r * p..(r + 1) * p]
    }
}

/// Tiles a `C x H x W` image into patches.
pub fn extract_patches<F: Scalar>(image: &Tensor<F>, window: Window) -> Result<PatchGrid<F>> {
    let &[c, h, w] = image.shape() else {
        return shape_err(
            "extract_patches",
            format!("expected C x H x W, got {:?}", image.shape()),
        );
    };
    let (gh, gw) = window.grid(h, w);
    let p = window.patch_dim(c);
    let mut data = Vec::with_capacity(gh * gw * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for k in 0..p {
                data.push(patch_source(window, (c, h, w), gy, gx, k).map_or(F::zero(), |i| image.data()[i]));
            }
        }
    }
    Ok(PatchGrid {
        grid_height: gh,
        grid_width: gw,
        values: Tensor::new(&[gh * gw, p], data)?,
    })
}

/// Inverse of [`extract_patches`] for an image of `channels x height x width`.
pub fn reconstruct<F: Scalar>(
    grid: &PatchGrid<F>,
    window: Window,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<F>> {
    if grid.patch_dim() != window.patch_dim(channels)
        || window.grid(height, width) != (grid.grid_height, grid.grid_width)
    {
        return shape_err("reconstruct", "grid does not match the requested image");
    }
    let mut out = Tensor::zeros(&[channels, height, width]);
    for gy in 0..grid.grid_height {
        for gx in 0..grid.grid_width {
            for (k, &v) in grid.patch(gy, gx).iter().enumerate() {
                if let Some(i) = patch_source(window, (channels, height, width), gy, gx, k) {
                    out.data_mut()[i] = v;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Called with the state a direction is about to consume at each step.
pub type SweepProbe<'a, 'f, F> = &'a mut (dyn FnMut(&Tape<F>, Direction, usize, &CellState) + 'f);

/// Runs `forward` over steps `0..steps` and `backward` over `steps-1..=0`,
/// each from a zero state, on a step-major `(steps * rows) x dim` sequence.
/// Returns `(steps * rows) x 2h` in the same layout, forward half first.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_sweep<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Bindings,
    mix: Option<&MixWeights>,
    forward: &Cell,
    backward: &Cell,
    seq: Var,
    steps: usize,
    mut probe: Option<SweepProbe<'_, '_, F>>,
) -> Result<Var> {
    let total = tape.shape(seq)[0];
    if steps == 0 || !total.is_multiple_of(steps) {
        return shape_err("sweep", format!("{total} rows cannot hold {steps} steps"));
    }
    let rows = total / steps;
    let inputs: Vec<Var> = (0..steps)
        .map(|s| tape.slice_rows(seq, s * rows, rows))
        .collect::<Result<_>>()?;

    let mut run = |tape: &mut Tape<F>, cell: &Cell, dir: Direction, order: Vec<usize>| -> Result<Vec<Var>> {
        let mut state = cell.zero_state(tape, rows);
        let mut out = vec![state.output; steps];
        for s in order {
            if let Some(p) = probe.as_mut() {
                p(tape, dir, s, &state);
            }
            state = cell.step(tape, bind, mix, inputs[s], &state)?;
            out[s] = state.output;
        }
        Ok(out)
    };
    let f = run(tape, forward, Direction::Forward, (0..steps).collect())?;
    let b = run(tape, backward, Direction::Backward, (0..steps).rev().collect())?;
    let joined: Vec<Var> = f
        .into_iter()
        .zip(b)
        .map(|(fv, bv)| tape.concat_cols(&[fv, bv]))
        .collect::<Result<_>>()?;
    tape.concat_rows(&joined)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    #[default]
    Vanilla,
    /// Each input patch is scaled by a learned `sigmoid(s)` per grid position.
    SigmoidWeighting,
    /// Forward and backward cells of each sweep share parameters.
    DirectionalWeightSharing,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::SigmoidWeighting => "sigmoid-weighting",
            Variant::DirectionalWeightSharing => "dws",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vanilla" => Ok(Variant::Vanilla),
            "sigmoid-weighting" | "sw" => Ok(Variant::SigmoidWeighting),
            "dws" | "directional-weight-sharing" => Ok(Variant::DirectionalWeightSharing),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReNetLayerConfig {
    pub window: Window,
    /// Per direction; the layer emits twice this many channels.
    pub hidden_dim: usize,
    pub variant: Variant,
    pub cell: CellKind,
    pub timing: PredecessorTiming,
    pub init: Init,
}

impl ReNetLayerConfig {
    pub fn new(window: usize, hidden_dim: usize, variant: Variant, cell: CellKind) -> Self {
        ReNetLayerConfig {
            window: Window::square(window),
            hidden_dim,
            variant,
            cell,
            timing: PredecessorTiming::default(),
            init: Init::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.window.height == 0 || self.window.width == 0 {
            return Err(Error::Config("ReNet hidden size and window must be positive".into()));
        }
        Ok(())
    }
}

/// Cells of one sweep orientation.
#[derive(Clone, Debug)]
pub struct SweepCells {
    pub forward: Cell,
    pub backward: Cell,
}

#[derive(Clone, Debug)]
pub struct ReNetLayer {
    config: ReNetLayerConfig,
    input: (usize, usize, usize),
    grid: (usize, usize),
    pub horizontal: SweepCells,
    pub vertical: SweepCells,
    pub sigmoid_weights: Option<ParamId>,
}

impl ReNetLayer {
    /// Registers parameters as `<prefix>.<h|v>.<f|b>.*` (and `<prefix>.sw`)
    /// for inputs of `channels x height x width`.
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        config: ReNetLayerConfig,
        (channels, height, width): (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grid = config.window.grid(height, width);
        let spec = |input_dim| CellSpec {
            kind: config.cell.clone(),
            input_dim,
            hidden_dim: config.hidden_dim,
            timing: config.timing,
            init: config.init,
        };
        let mut sweep = |orient: &str, input_dim: usize, rng: &mut R| -> Result<SweepCells> {
            let forward = Cell::register(store, &format!("{prefix}.{orient}.f"), spec(input_dim), rng)?;
            let backward = match config.variant {
                Variant::DirectionalWeightSharing => forward.clone(),
                _ => Cell::register(store, &format!("{prefix}.{orient}.b"), spec(input_dim), rng)?,
            };
            Ok(SweepCells { forward, backward })
        };
        let horizontal = sweep("h", config.window.patch_dim(channels), rng)?;
        let vertical = sweep("v", 2 * config.hidden_dim, rng)?;
        let sigmoid_weights = (config.variant == Variant::SigmoidWeighting).then(|| {
            store.add(
                format!("{prefix}.sw"),
                Tensor::zeros(&[grid.0 * grid.1]),
                ParamGroup::Weights,
            )
        });
        Ok(ReNetLayer {
            config,
            input: (channels, height, width),
            grid,
            horizontal,
            vertical,
            sigmoid_weights,
        })
    }

    pub fn config(&self) -> &ReNetLayerConfig {
        &self.config
    }

    /// `(channels, height, width)` of the output map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        (2 * self.config.hidden_dim, self.grid.0, self.grid.1)
    }

    fn check_input<F: Scalar>(&self, tape: &Tape<F>, x: Var) -> Result<usize> {
        match *tape.shape(x) {
            [n, c, h, w] if (c, h, w) == self.input => Ok(n),
            ref s => shape_err("renet", format!("expected N x {:?}, got {s:?}", self.input)),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        mix: Option<&MixWeights>,
        x: Var,
    ) -> Result<Var> {
        self.forward_probed(tape, bind, mix, x, None)
    }

    /// [`ReNetLayer::forward`] with a probe observing every sweep step.
    pub fn forward_probed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Bindings,
        mix: Option<&MixWeights>,
        x: Var,
        mut probe: Option<SweepProbe<'_, '_, F>>,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut map = patch_map(tape, x, self.config.window)?;
        if let Some(sw) = self.sigmoid_weights {
            map = apply_sigmoid_weighting(tape, map, bind[sw])?;
        }
        let map = sweep_map(
            tape,
            bind,
            mix,
            &self.horizontal,
            map,
            Orientation::Horizontal,
            probe.as_deref_mut(),
        )?;
        sweep_map(tape, bind, mix, &self.vertical, map, Orientation::Vertical, probe)
    }
}

fn dims4<F: Scalar>(op: &'static str, tape: &Tape<F>, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => shape_err(op, format!("expected N x C x H x W, got {s:?}")),
    }
}

/// Differentiable patch extraction: `N x C x H x W` to
/// `N x (C * wh * ww) x H' x W'`, each position holding one flattened patch.
pub fn patch_map<F: Scalar>(tape: &mut Tape<F>, x: Var, window: Window) -> Result<Var> {
    let (n, c, h, w) = dims4("patch_map", tape, x)?;
    if window == Window::square(1) {
        return Ok(x);
    }
    let (gh, gw) = window.grid(h, w);
    let p = window.patch_dim(c);
    let mut index = Vec::with_capacity(n * p * gh * gw);
    for b in 0..n {
        for k in 0..p {
            for gy in 0..gh {
                for gx in 0..gw {
                    index.push(patch_source(window, (c, h, w), gy, gx, k).map_or(PAD_INDEX, |i| b * c * h * w + i));
                }
            }
        }
    }
    tape.gather(x, index, &[n, p, gh, gw])
}

/// Scales every feature vector at grid position `(y, x)` of an
/// `N x C x H x W` map by `sigmoid(weights[y * W + x])`.
pub fn apply_sigmoid_weighting<F: Scalar>(tape: &mut Tape<F>, map: Var, weights: Var) -> Result<Var> {
    let (n, c, h, w) = dims4("sigmoid_weighting", tape, map)?;
    if tape.value(weights).len() != h * w {
        return shape_err(
            "sigmoid_weighting",
            format!("{} weights for a {h}x{w} grid", tape.value(weights).len()),
        );
    }
    let gates = tape.sigmoid(weights)?;
    let column = tape.reshape(map, &[n * c * h * w, 1])?;
    let scaled = tape.scale_rows(column, gates, (0..n * c * h * w).map(|r| r % (h * w)).collect())?;
    tape.reshape(scaled, &[n, c, h, w])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Sequences run along each row, left to right.
    Horizontal,
    /// Sequences run along each column, top to bottom.
    Vertical,
}

/// Bidirectional sweep of an `N x C x H x W` map along `orientation`,
/// returning `N x 2h x H x W` with the forward state in the first `h`
/// channels.
pub fn sweep_map<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Bindings,
    mix: Option<&MixWeights>,
    cells: &SweepCells,
    map: Var,
    orientation: Orientation,
    probe: Option<SweepProbe<'_, '_, F>>,
) -> Result<Var> {
    let (n, c, h, w) = dims4("sweep", tape, map)?;
    // position of (b, y, x) in the step-major layout: (step, b, lane)
    let (steps, lanes) = match orientation {
        Orientation::Horizontal => (w, h),
        Orientation::Vertical => (h, w),
    };
    let row_of = |b: usize, y: usize, x: usize| match orientation {
        Orientation::Horizontal => (x * n + b) * lanes + y,
        Orientation::Vertical => (y * n + b) * lanes + x,
    };
    let mut index = vec![0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    index[row_of(b, y, x) * c + ch] = ((b * c + ch) * h + y) * w + x;
                }
            }
        }
    }
    let seq = tape.gather(map, index, &[n * h * w, c])?;
    let out = bidirectional_sweep(tape, bind, mix, &cells.forward, &cells.backward, seq, steps, probe)?;
    let two_h = tape.shape(out)[1];
    let mut index = Vec::with_capacity(n * two_h * h * w);
    for b in 0..n {
        for ch in 0..two_h {
            for y in 0..h {
                for x in 0..w {
                    index.push(row_of(b, y, x) * two_h + ch);
                }
            }
        }
    }
    tape.gather(out, index, &[n, two_h, h, w])
}
