//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends one node holding its output value and
//! enough saved state to run its vector-Jacobian product. The tape is rebuilt
//! for every forward pass; [`Tape::backward`] consumes it.

use std::ops::Index;

use super::activation::sigmoid;
use super::{Activation, ParamGroup, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Marker in gather indices for "read zero" (used for padding).
pub const PAD_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Activation(Var, Activation),
    Softmax {
        input: Var,
        axis: usize,
    },
    Blend {
        gate: Var,
        a: Var,
        b: Var,
    },
    GatedUpdate {
        z: Var,
        prev: Var,
        act: Activation,
        gate: Vec<F>,
        cand: Vec<F>,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<Var>,
    },
    Mean(Vec<Var>),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    ScaleRows {
        input: Var,
        scale: Var,
        map: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Conv2dGeometry,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Parameter handles bound onto one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn require_rank2<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.dims2() {
        Some(d) => Ok(d),
        None => shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Binds every parameter of `store` as a leaf. Parameters whose group
    /// fails `trainable` are bound without gradient.
    pub fn bind_params(&mut self, store: &ParamStore<F>, trainable: impl Fn(ParamGroup) -> bool) -> Bindings {
        let vars = store
            .iter()
            .map(|(id, p)| self.push_unchecked(p.value.clone(), Op::Param(id), trainable(p.group)))
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul", self.value(a))?;
        let (k2, n) = require_rank2("matmul", self.value(b))?;
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions differ: {m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            F::zero(),
            &mut out,
        );
        let value = Tensor::new(&[m, n], out)?;
        let g = self.any_grad(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), g)
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        self.push("add", value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        self.push("sub", value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), g)
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = require_rank2("add_bias", self.value(x))?;
        if self.value(bias).len() != n {
            return shape_err(
                "add_bias",
                format!("bias has {} values for {n} columns", self.value(bias).len()),
            );
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        let g = self.any_grad(&[x, bias]);
        self.push("add_bias", value, Op::AddBias(x, bias), g)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = F::from_f64(s);
        let value = self.value(x).map(|v| v * s);
        let g = self.any_grad(&[x]);
        self.push("scale", value, Op::Scale(x, s), g)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        let value = self.value(x).map(|v| act.apply(v));
        let g = self.any_grad(&[x]);
        self.push("activation", value, Op::Activation(x, act), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::ReLU)
    }

    /// Softmax along `axis`, stabilized by subtracting the lane maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return shape_err("softmax", format!("axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, extent, inner) = lanes(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent).map(|k| src[at(k)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for k in 0..extent {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let g = self.any_grad(&[x]);
        self.push("softmax", value, Op::Softmax { input: x, axis }, g)
    }

    /// Elementwise `(1 - gate) * a + gate * b`.
    pub fn blend(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let (tg, ta, tb) = (self.value(gate), self.value(a), self.value(b));
        if tg.shape() != ta.shape() || ta.shape() != tb.shape() {
            return shape_err("blend", format!("{:?}, {:?}, {:?}", tg.shape(), ta.shape(), tb.shape()));
        }
        let data = tg
            .data()
            .iter()
            .zip(ta.data().iter().zip(tb.data()))
            .map(|(&c, (&x, &y))| (F::one() - c) * x + c * y)
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let g = self.any_grad(&[gate, a, b]);
        self.push("blend", value, Op::Blend { gate, a, b }, g)
    }

    /// Fused cell-vertex update. `z` is `m x 2h`: the first half is the gate
    /// pre-activation, the second half the candidate pre-activation. Returns
    /// `(1 - c) * prev + c * act(u)` with `c = sigmoid(first half)`.
    pub fn gated_update(&mut self, z: Var, prev: Var, act: Activation) -> Result<Var> {
        let (m, two_h) = require_rank2("gated_update", self.value(z))?;
        let (pm, h) = require_rank2("gated_update", self.value(prev))?;
        if pm != m || two_h != 2 * h {
            return shape_err(
                "gated_update",
                format!("pre-activation {m}x{two_h} incompatible with state {pm}x{h}"),
            );
        }
        let zd = self.value(z).data();
        let pd = self.value(prev).data();
        let mut gate = vec![F::zero(); m * h];
        let mut cand = vec![F::zero(); m * h];
        let mut out = vec![F::zero(); m * h];
        for r in 0..m {
            for c in 0..h {
                let gv = sigmoid(zd[r * two_h + c]);
                let cv = act.apply(zd[r * two_h + h + c]);
                let i = r * h + c;
                gate[i] = gv;
                cand[i] = cv;
                out[i] = (F::one() - gv) * pd[i] + gv * cv;
            }
        }
        let value = Tensor::new(&[m, h], out)?;
        let g = self.any_grad(&[z, prev]);
        self.push(
            "gated_update",
            value,
            Op::GatedUpdate {
                z,
                prev,
                act,
                gate,
                cand,
            },
            g,
        )
    }

    /// `sum_k weights[k] * terms[k]` with a length-K weight vector.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.len() != terms.len() || terms.is_empty() {
            return shape_err("weighted_sum", format!("{} weights for {} terms", w.len(), terms.len()));
        }
        let shape = self.value(terms[0]).shape().to_vec();
        let mut out = vec![F::zero(); self.value(terms[0]).len()];
        for (k, &t) in terms.iter().enumerate() {
            let tv = self.value(t);
            if tv.shape() != shape.as_slice() {
                return shape_err("weighted_sum", format!("term shapes {:?} vs {shape:?}", tv.shape()));
            }
            let wk = self.value(weights).data()[k];
            for (o, &v) in out.iter_mut().zip(tv.data()) {
                *o += wk * v;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let mut all = terms.to_vec();
        all.push(weights);
        let g = self.any_grad(&all);
        self.push(
            "weighted_sum",
            value,
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
            g,
        )
    }

    /// Elementwise arithmetic mean of same-shape tensors.
    pub fn mean_of(&mut self, terms: &[Var]) -> Result<Var> {
        let Some(&first) = terms.first() else {
            return shape_err("mean_of", "no terms");
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![F::zero(); self.value(first).len()];
        for &t in terms {
            let tv = self.value(t);
            if tv.shape() != shape.as_slice() {
                return shape_err("mean_of", format!("term shapes {:?} vs {shape:?}", tv.shape()));
            }
            for (o, &v) in out.iter_mut().zip(tv.data()) {
                *o += v;
            }
        }
        let k = F::from_f64(terms.len() as f64);
        for o in &mut out {
            *o /= k;
        }
        let value = Tensor::new(&shape, out)?;
        let g = self.any_grad(terms);
        self.push("mean_of", value, Op::Mean(terms.to_vec()), g)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let g = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(F::from_f64(total)), Op::Sum(x), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let (m, _) = require_rank2("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = require_rank2("concat_cols", self.value(p))?;
            if pm != m {
                return shape_err("concat_cols", format!("row counts {pm} vs {m}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], out)?;
        let g = self.any_grad(parts);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let (_, n) = require_rank2("concat_rows", self.value(first))?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = require_rank2("concat_rows", self.value(p))?;
            if pn != n {
                return shape_err("concat_rows", format!("column counts {pn} vs {n}"));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], out)?;
        let g = self.any_grad(parts);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_rank2("slice_cols", self.value(x))?;
        if start + len > n {
            return shape_err("slice_cols", format!("columns {start}..{} of {n}", start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        let g = self.any_grad(&[x]);
        self.push("slice_cols", value, Op::SliceCols { input: x, start }, g)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_rank2("slice_rows", self.value(x))?;
        if start + len > m {
            return shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(&[len, n], out)?;
        let g = self.any_grad(&[x]);
        self.push("slice_rows", value, Op::SliceRows { input: x, start }, g)
    }

    /// Output row `r` is input row `index[r]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (m, n) = require_rank2("gather_rows", self.value(x))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return shape_err("gather_rows", format!("row {bad} out of {m}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in &index {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[index.len(), n], out)?;
        let g = self.any_grad(&[x]);
        self.push("gather_rows", value, Op::GatherRows { input: x, index }, g)
    }

    /// Output element `k` is input element `index[k]` (flat), or zero where
    /// `index[k] == PAD_INDEX`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return shape_err("gather", format!("{} indices for shape {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != PAD_INDEX && i >= src.len()) {
            return shape_err("gather", format!("element {bad} out of {}", src.len()));
        }
        let out = index
            .iter()
            .map(|&i| if i == PAD_INDEX { F::zero() } else { src[i] })
            .collect();
        let value = Tensor::new(shape, out)?;
        let g = self.any_grad(&[x]);
        self.push("gather", value, Op::Gather { input: x, index }, g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        self.push("reshape", value, Op::Reshape(x), g)
    }

    /// Scales row `r` of `x` by `scale[map[r]]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var, map: Vec<usize>) -> Result<Var> {
        let (m, n) = require_rank2("scale_rows", self.value(x))?;
        let s = self.value(scale).data();
        if map.len() != m {
            return shape_err("scale_rows", format!("{} row mappings for {m} rows", map.len()));
        }
        if let Some(&bad) = map.iter().find(|&&p| p >= s.len()) {
            return shape_err("scale_rows", format!("scale index {bad} out of {}", s.len()));
        }
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let f = s[map[r]];
            for v in row {
                *v *= f;
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let g = self.any_grad(&[x, scale]);
        self.push("scale_rows", value, Op::ScaleRows { input: x, scale, map }, g)
    }

    /// Cross-correlation of `N x C x H x W` input with `O x C x KH x KW`
    /// kernels plus a per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: Conv2dGeometry) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (&[n, c, h, w], &[o, wc, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?} must both be rank 4"));
        };
        if wc != c {
            return shape_err("conv2d", format!("kernel expects {wc} channels, input has {c}"));
        }
        if self.value(bias).len() != o {
            return shape_err(
                "conv2d",
                format!("bias length {} for {o} kernels", self.value(bias).len()),
            );
        }
        let geo = ConvShape::new(c, h, w, kh, kw, geom)?;
        let (ho, wo) = (geo.out_h, geo.out_w);
        let l = ho * wo;
        let ckk = c * kh * kw;
        let mut out = vec![F::zero(); n * o * l];
        let mut col = vec![F::zero(); ckk * l];
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        for s in 0..n {
            geo.im2col(&xd[s * c * h * w..(s + 1) * c * h * w], &mut col);
            let dst = &mut out[s * o * l..(s + 1) * o * l];
            F::gemm(o, ckk, l, wd, false, &col, false, F::zero(), dst);
            for (oc, row) in dst.chunks_mut(l).enumerate() {
                for v in row {
                    *v += bd[oc];
                }
            }
        }
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        let g = self.any_grad(&[x, weight, bias]);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
            },
            g,
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = require_rank2("cross_entropy", self.value(logits))?;
        if k < 2 {
            return shape_err("cross_entropy", format!("need at least 2 classes, got {k}"));
        }
        if labels.len() != n {
            return shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * k];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            let lse = max + z.ln();
            total += (lse - row[labels[r]]).as_f64();
        }
        let value = Tensor::scalar(F::from_f64(total / n as f64));
        let g = self.any_grad(&[logits]);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        )
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        }
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    params.push((id, Var(idx)));
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, idx, &g, &mut grads)?;
        }
        let params = params.into_iter().filter(|(_, v)| grads[v.0].is_some()).collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf (variable or parameter). `None` when the leaf is
    /// not reachable from the loss or does not require gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Parameters that received gradient, in binding order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().rev().map(|(id, _)| *id)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for &(id, v) in self.params.iter().rev() {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradient buffer of `v`, zero-initialized on first use; `None` when `v`
/// does not take gradient.
fn slot<'g, F: Scalar>(nodes: &[Node<F>], grads: &'g mut [Option<Tensor<F>>], v: Var) -> Option<&'g mut Tensor<F>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let shape = nodes[v.0].value.shape();
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
}

fn backprop<F: Scalar>(nodes: &[Node<F>], idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[idx].op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matmul lhs");
            let n = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                F::gemm(m, n, k, gd, false, val(*b).data(), true, F::one(), ga.data_mut());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                F::gemm(k, m, n, val(*a).data(), true, gd, false, F::one(), gb.data_mut());
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.add_assign(g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (o, &v) in gb.data_mut().iter_mut().zip(gd) {
                    *o -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &v), &y) in ga.data_mut().iter_mut().zip(gd).zip(val(*b).data()) {
                    *o += v * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((o, &v), &x) in gb.data_mut().iter_mut().zip(gd).zip(val(*a).data()) {
                    *o += v * x;
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.add_assign(g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let n = gb.len();
                let gbd = gb.data_mut();
                for row in gd.chunks(n) {
                    for (o, &v) in gbd.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (o, &v) in gx.data_mut().iter_mut().zip(gd) {
                    *o += v * *s;
                }
            }
        }
        Op::Activation(x, act) => {
            let y = nodes[idx].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &v), &yv) in gx.data_mut().iter_mut().zip(gd).zip(y) {
                    *o += v * act.derivative_from_output(yv);
                }
            }
        }
        Op::Softmax { input, axis } => {
            let y = &nodes[idx].value;
            let (outer, extent, inner) = lanes(y.shape(), *axis);
            let yd = y.data();
            if let Some(gx) = slot(nodes, grads, *input) {
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * extent + k) * inner + i;
                        let dot = (0..extent).fold(F::zero(), |acc, k| acc + gd[at(k)] * yd[at(k)]);
                        for k in 0..extent {
                            gxd[at(k)] += yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::Blend { gate, a, b } => {
            let (cg, ad, bd) = (val(*gate).data(), val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &v), &c) in ga.data_mut().iter_mut().zip(gd).zip(cg) {
                    *o += v * (F::one() - c);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((o, &v), &c) in gb.data_mut().iter_mut().zip(gd).zip(cg) {
                    *o += v * c;
                }
            }
            if let Some(gc) = slot(nodes, grads, *gate) {
                for (i, o) in gc.data_mut().iter_mut().enumerate() {
                    *o += gd[i] * (bd[i] - ad[i]);
                }
            }
        }
        Op::GatedUpdate {
            z,
            prev,
            act,
            gate,
            cand,
        } => {
            let pd = val(*prev).data();
            let h = val(*prev).shape()[1];
            if let Some(gp) = slot(nodes, grads, *prev) {
                for ((o, &v), &c) in gp.data_mut().iter_mut().zip(gd).zip(gate) {
                    *o += v * (F::one() - c);
                }
            }
            if let Some(gz) = slot(nodes, grads, *z) {
                let gzd = gz.data_mut();
                for (i, &v) in gd.iter().enumerate() {
                    let (r, col) = (i / h, i % h);
                    let c = gate[i];
                    let dc = v * (cand[i] - pd[i]);
                    gzd[r * 2 * h + col] += dc * c * (F::one() - c);
                    gzd[r * 2 * h + h + col] += v * c * act.derivative_from_output(cand[i]);
                }
            }
        }
        Op::WeightedSum { weights, terms } => {
            let w = val(*weights).data().to_vec();
            if nodes[weights.0].needs_grad {
                let partial: Vec<F> = terms
                    .iter()
                    .map(|t| {
                        gd.iter()
                            .zip(val(*t).data())
                            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
                    })
                    .collect();
                let gw = slot(nodes, grads, *weights).expect("weights take grad");
                for (o, p) in gw.data_mut().iter_mut().zip(partial) {
                    *o += p;
                }
            }
            for (t, wk) in terms.iter().zip(w) {
                if let Some(gt) = slot(nodes, grads, *t) {
                    for (o, &v) in gt.data_mut().iter_mut().zip(gd) {
                        *o += v * wk;
                    }
                }
            }
        }
        Op::Mean(terms) => {
            let inv = F::one() / F::from_f64(terms.len() as f64);
            for t in terms {
                if let Some(gt) = slot(nodes, grads, *t) {
                    for (o, &v) in gt.data_mut().iter_mut().zip(gd) {
                        *o += v * inv;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = gd[0];
                for o in gx.data_mut() {
                    *o += s;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[idx].value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (r, row) in gp.data_mut().chunks_mut(w).enumerate() {
                        for (o, &v) in row.iter_mut().zip(&gd[r * total + offset..r * total + offset + w]) {
                            *o += v;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (o, &v) in gp.data_mut().iter_mut().zip(&gd[offset..offset + len]) {
                        *o += v;
                    }
                }
                offset += len;
            }
        }
        Op::SliceCols { input, start } => {
            let n = val(*input).shape()[1];
            let len = nodes[idx].value.shape()[1];
            if let Some(gx) = slot(nodes, grads, *input) {
                for (r, row) in gd.chunks(len).enumerate() {
                    for (o, &v) in gx.data_mut()[r * n + start..r * n + start + len].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Op::SliceRows { input, start } => {
            let n = val(*input).shape()[1];
            if let Some(gx) = slot(nodes, grads, *input) {
                for (o, &v) in gx.data_mut()[start * n..start * n + gd.len()].iter_mut().zip(gd) {
                    *o += v;
                }
            }
        }
        Op::GatherRows { input, index } => {
            let n = val(*input).shape()[1];
            if let Some(gx) = slot(nodes, grads, *input) {
                let gxd = gx.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    for (o, &v) in gxd[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
            }
        }
        Op::Gather { input, index } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                let gxd = gx.data_mut();
                for (&i, &v) in index.iter().zip(gd) {
                    if i != PAD_INDEX {
                        gxd[i] += v;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (o, &v) in gx.data_mut().iter_mut().zip(gd) {
                    *o += v;
                }
            }
        }
        Op::ScaleRows { input, scale, map } => {
            let n = val(*input).shape()[1];
            let sd = val(*scale).data();
            if let Some(gx) = slot(nodes, grads, *input) {
                for (r, row) in gx.data_mut().chunks_mut(n).enumerate() {
                    let f = sd[map[r]];
                    for (o, &v) in row.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o += v * f;
                    }
                }
            }
            let xd = val(*input).data();
            if let Some(gs) = slot(nodes, grads, *scale) {
                let gsd = gs.data_mut();
                for (r, &p) in map.iter().enumerate() {
                    let dot = gd[r * n..(r + 1) * n]
                        .iter()
                        .zip(&xd[r * n..(r + 1) * n])
                        .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                    gsd[p] += dot;
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let xs = val(*input).shape();
            let ws = val(*weight).shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (o, kh, kw) = (ws[0], ws[2], ws[3]);
            let geo = ConvShape::new(c, h, w, kh, kw, *geom)?;
            let l = geo.out_h * geo.out_w;
            let ckk = c * kh * kw;
            if let Some(gb) = slot(nodes, grads, *bias) {
                let gbd = gb.data_mut();
                for s in 0..n {
                    for (oc, row) in gd[s * o * l..(s + 1) * o * l].chunks(l).enumerate() {
                        gbd[oc] += row.iter().copied().fold(F::zero(), |a, b| a + b);
                    }
                }
            }
            let want_w = nodes[weight.0].needs_grad;
            let want_x = nodes[input.0].needs_grad;
            if want_w || want_x {
                let xd = val(*input).data();
                let wd = val(*weight).data();
                let mut col = vec![F::zero(); ckk * l];
                let mut gcol = vec![F::zero(); ckk * l];
                for s in 0..n {
                    let gs = &gd[s * o * l..(s + 1) * o * l];
                    if want_w {
                        geo.im2col(&xd[s * c * h * w..(s + 1) * c * h * w], &mut col);
                        let gw = slot(nodes, grads, *weight).expect("weight grad");
                        F::gemm(o, l, ckk, gs, false, &col, true, F::one(), gw.data_mut());
                    }
                    if want_x {
                        F::gemm(ckk, o, l, wd, true, gs, false, F::zero(), &mut gcol);
                        let gx = slot(nodes, grads, *input).expect("input grad");
                        geo.col2im_add(&gcol, &mut gx.data_mut()[s * c * h * w..(s + 1) * c * h * w]);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = gd[0] / F::from_f64(n as f64);
            if let Some(gx) = slot(nodes, grads, *logits) {
                let gxd = gx.data_mut();
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let t = if j == y { F::one() } else { F::zero() };
                        gxd[r * k + j] += scale * (probs[r * k + j] - t);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Geometry of one convolution, shared by the forward and backward kernels.
struct ConvShape {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvShape {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, geom: Conv2dGeometry) -> Result<Self> {
        let Conv2dGeometry { stride, padding } = geom;
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit {h}x{w}"),
            );
        }
        Ok(ConvShape {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Source pixel for output position and kernel tap, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<F: Scalar>(&self, img: &[F], col: &mut [F]) {
        let l = self.out_h * self.out_w;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * l;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            col[row + oy * self.out_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => img[(ch * self.h + y) * self.w + x],
                                None => F::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<F: Scalar>(&self, col: &[F], img: &mut [F]) {
        let l = self.out_h * self.out_w;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * l;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                img[(ch * self.h + y) * self.w + x] += col[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
