//! Gradient checks of every tape primitive, shared by the unit tests, the
//! self-test command and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, GradCheckConfig, GradCheckReport};
use super::{Activation, Conv2dGeometry, Scalar, Tape, Tensor, Var, PAD_INDEX};
use crate::error::Result;

type Loss<F> = Box<dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>>;
type Case<F> = (&'static str, Vec<Tensor<F>>, Loss<F>);

/// One primitive under test: a scalar loss over random inputs.
pub struct PrimitiveCase<F: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<F>>,
    pub loss: Loss<F>,
}

fn random<F: Scalar>(shape: &[usize], seed: u64) -> Tensor<F> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Keeps probes clear of the ReLU kink at zero.
fn away_from_zero<F: Scalar>(x: F) -> F {
    let v = x.as_f64();
    F::from_f64(v.signum() * (0.2 + v.abs()))
}

pub fn primitive_cases<F: Scalar>() -> Vec<PrimitiveCase<F>> {
    let cases: Vec<Case<F>> = vec![
        (
            "add",
            vec![random::<F>(&[3, 4], 20), random::<F>(&[3, 4], 21)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "sub",
            vec![random::<F>(&[3, 4], 22), random::<F>(&[3, 4], 23)],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "mul",
            vec![random::<F>(&[3, 4], 24), random::<F>(&[3, 4], 25)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "add_bias",
            vec![random::<F>(&[3, 4], 26), random::<F>(&[4], 27)],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.sigmoid(y)?;
                t.sum(y)
            }),
        ),
        (
            "scale",
            vec![random::<F>(&[5], 28)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7)?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "activations",
            vec![random::<F>(&[4, 6], 29).map(away_from_zero)],
            Box::new(|t, v| {
                let mut acc = Vec::new();
                for a in Activation::ALL {
                    let y = t.activate(v[0], a)?;
                    let y = t.mul(y, y)?;
                    acc.push(t.sum(y)?);
                }
                acc.iter().skip(1).try_fold(acc[0], |s, &p| t.add(s, p))
            }),
        ),
        (
            "softmax",
            vec![random::<F>(&[3, 5], 30), random::<F>(&[3, 5], 31)],
            Box::new(|t, v| {
                let s = t.softmax(v[0], 1)?;
                let y = t.mul(s, v[1])?;
                t.sum(y)
            }),
        ),
        (
            "blend",
            vec![
                random::<F>(&[2, 3], 32),
                random::<F>(&[2, 3], 33),
                random::<F>(&[2, 3], 34),
            ],
            Box::new(|t, v| {
                let g = t.sigmoid(v[0])?;
                let y = t.blend(g, v[1], v[2])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "gated_update",
            vec![random::<F>(&[3, 8], 35).map(away_from_zero), random::<F>(&[3, 4], 36)],
            Box::new(|t, v| {
                let mut outs = Vec::new();
                for a in Activation::ALL {
                    let y = t.gated_update(v[0], v[1], a)?;
                    outs.push(t.mul(y, y)?);
                }
                let m = t.mean_of(&outs)?;
                t.sum(m)
            }),
        ),
        (
            "weighted_sum",
            vec![
                random::<F>(&[3], 37),
                random::<F>(&[2, 2], 38),
                random::<F>(&[2, 2], 39),
                random::<F>(&[2, 2], 40),
            ],
            Box::new(|t, v| {
                let y = t.weighted_sum(v[0], &v[1..])?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "concat_slice",
            vec![
                random::<F>(&[3, 2], 41),
                random::<F>(&[3, 4], 42),
                random::<F>(&[2, 6], 43),
            ],
            Box::new(|t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let r = t.concat_rows(&[c, v[2]])?;
                let a = t.slice_cols(r, 1, 3)?;
                let b = t.slice_rows(r, 2, 3)?;
                let a = t.tanh(a)?;
                let b = t.sigmoid(b)?;
                let sa = t.sum(a)?;
                let sb = t.sum(b)?;
                t.add(sa, sb)
            }),
        ),
        (
            "gather",
            vec![random::<F>(&[4, 3], 44)],
            Box::new(|t, v| {
                let r = t.gather_rows(v[0], vec![3, 1, 1, 0])?;
                let g = t.gather(r, vec![0, PAD_INDEX, 5, 5, 11, 2], &[2, 3])?;
                let g = t.reshape(g, &[3, 2])?;
                let y = t.tanh(g)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "scale_rows",
            vec![random::<F>(&[4, 3], 45), random::<F>(&[2], 46)],
            Box::new(|t, v| {
                let y = t.scale_rows(v[0], v[1], vec![0, 1, 1, 0])?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "matmul",
            vec![random::<F>(&[3, 4], 47), random::<F>(&[4, 2], 48)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "cross_entropy",
            vec![random::<F>(&[4, 3], 49)],
            Box::new(|t, v| t.cross_entropy(v[0], &[2, 0, 1, 1])),
        ),
        (
            "conv2d_same",
            vec![
                random::<F>(&[2, 3, 5, 5], 51),
                random::<F>(&[4, 3, 3, 3], 52),
                random::<F>(&[4], 53),
            ],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], Conv2dGeometry { stride: 1, padding: 1 })?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
        (
            "conv2d_strided",
            vec![
                random::<F>(&[2, 3, 5, 5], 54),
                random::<F>(&[4, 3, 3, 3], 55),
                random::<F>(&[4], 56),
            ],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], Conv2dGeometry { stride: 2, padding: 0 })?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, loss)| PrimitiveCase { name, inputs, loss })
        .collect()
}

/// Runs every primitive case with `cfg`.
pub fn run_primitive_suite<F: Scalar>(cfg: GradCheckConfig, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    primitive_cases::<F>()
        .into_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = check_inputs(&case.inputs, |t, v| (case.loss)(t, v), cfg, &mut rng)?;
            Ok((case.name, report))
        })
        .collect()
}
