//! Central finite-difference gradient checks.
//!
//! The numeric side only ever calls forward passes, so it stays independent
//! of the backward rules it is used to validate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Max-norm relative error `|a - n|_inf / max(|a|_inf, |n|_inf)`, with the
/// denominator floored at `1e-8` so that two vanishing gradients compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-8);
    diff / scale
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each requested coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe)?;
            probe[i] = x[i] - h;
            let down = f(&probe)?;
            probe[i] = x[i];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// A differentiable primitive exercised on random inputs.
pub struct Primitive {
    pub name: &'static str,
    pub inputs: &'static [&'static [usize]],
    pub build: Build,
}

const M44: &[usize] = &[4, 4];
const V4: &[usize] = &[4];

/// Every primitive the tape supports, plus the composite linear and
/// attention maps built from them.
pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive { name: "add", inputs: &[M44, M44], build: |t, v| t.add(v[0], v[1]) },
        Primitive { name: "sub", inputs: &[M44, M44], build: |t, v| t.sub(v[0], v[1]) },
        Primitive { name: "mul", inputs: &[M44, M44], build: |t, v| t.mul(v[0], v[1]) },
        Primitive { name: "scale", inputs: &[M44], build: |t, v| t.scale(v[0], -1.7) },
        Primitive { name: "add_row", inputs: &[M44, V4], build: |t, v| t.add_row(v[0], v[1]) },
        Primitive { name: "mul_row", inputs: &[M44, V4], build: |t, v| t.mul_row(v[0], v[1]) },
        Primitive { name: "matmul", inputs: &[M44, M44], build: |t, v| t.matmul(v[0], v[1]) },
        Primitive { name: "transpose", inputs: &[M44], build: |t, v| t.transpose(v[0]) },
        Primitive { name: "softmax", inputs: &[M44], build: |t, v| t.softmax(v[0]) },
        Primitive { name: "layer_norm", inputs: &[M44], build: |t, v| t.layer_norm(v[0]) },
        Primitive { name: "gelu", inputs: &[M44], build: |t, v| t.gelu(v[0]) },
        Primitive { name: "concat_rows", inputs: &[M44, M44], build: |t, v| t.concat_rows(&[v[0], v[1]]) },
        Primitive { name: "slice_rows", inputs: &[M44], build: |t, v| t.slice_rows(v[0], 1, 2) },
        Primitive { name: "concat_cols", inputs: &[M44, M44], build: |t, v| t.concat_cols(&[v[0], v[1]]) },
        Primitive { name: "slice_cols", inputs: &[M44], build: |t, v| t.slice_cols(v[0], 1, 3) },
        Primitive { name: "gather_rows", inputs: &[M44], build: |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]) },
        Primitive { name: "sum", inputs: &[M44], build: |t, v| t.sum(v[0]) },
        Primitive { name: "mean", inputs: &[M44], build: |t, v| t.mean(v[0]) },
        Primitive { name: "mean_rows", inputs: &[M44], build: |t, v| t.mean_rows(v[0]) },
        Primitive {
            name: "softmax_cross_entropy",
            inputs: &[M44],
            build: |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 3]),
        },
        Primitive { name: "reshape", inputs: &[M44], build: |t, v| t.reshape(v[0], vec![2, 8]) },
        Primitive { name: "linear", inputs: &[M44, M44, V4], build: |t, v| t.linear(v[0], v[1], v[2]) },
        Primitive {
            name: "attention",
            inputs: &[M44, M44, M44],
            build: |t, v| crate::encoder::attention_head(t, v[0], v[1], v[2]),
        },
    ]
}

/// Scalarizes a primitive's output as `sum(w * out)` with fixed random `w`.
fn scalar_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.value(out).shape().to_vec())?)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn evaluate(p: &Primitive, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = (p.build)(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

/// Max relative error of one primitive at one random instance.
pub fn check_primitive(p: &Primitive, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = p.inputs.iter().map(|s| random_tensor(s, &mut rng)).collect();

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = (p.build)(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let weights = random_tensor(&out_shape, &mut rng);
    let loss = scalar_loss(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.tensor(&tape, vars[k]).data());
        let coords: Vec<usize> = (0..x.numel()).collect();
        let fd = central_difference(
            |probe| {
                let mut perturbed = inputs.clone();
                perturbed[k] = Tensor::new(x.shape().to_vec(), probe.to_vec())?;
                evaluate(p, &perturbed, &weights)
            },
            x.data(),
            &coords,
            FD_STEP,
        )?;
        numeric.extend(fd);
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Runs every primitive on `instances` seeded random inputs.
pub fn check_all_primitives(instances: usize, base_seed: u64) -> Result<Vec<GradCheckReport>> {
    primitives()
        .iter()
        .map(|p| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                worst = worst.max(check_primitive(p, base_seed.wrapping_add(i as u64))?);
            }
            Ok(GradCheckReport { name: p.name.to_string(), instances, max_rel_err: worst })
        })
        .collect()
}
