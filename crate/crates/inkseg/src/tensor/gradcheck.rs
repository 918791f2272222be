//! Central finite-difference utilities for verifying analytic gradients.
//!
//! These evaluate only the forward path and are therefore independent of the
//! backward implementation they check.

/// Central finite differences of `f` with respect to every element of every
/// input buffer. `f` receives the (possibly perturbed) buffers and must
/// return a scalar.
pub fn central_differences(
    inputs: &[Vec<f64>],
    h: f64,
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for e in 0..inputs[i].len() {
            let orig = work[i][e];
            work[i][e] = orig + h;
            let up = f(&work);
            work[i][e] = orig - h;
            let down = f(&work);
            work[i][e] = orig;
            g[e] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Mixed relative/absolute error: `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Largest [`rel_err`] over paired gradient buffers. Panics on length
/// mismatch, which would indicate a harness bug rather than a gradient bug.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (av, nv) in a.iter().zip(n) {
            worst = worst.max(rel_err(*av, *nv));
        }
    }
    worst
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::Result;

/// Outcome of one per-op gradient check.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_err: f64,
}

type OpBuilder = Box<dyn for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>>;

/// Compare the backward pass of one op (given differentiable inputs) against
/// central finite differences of its forward pass, scalarized through a
/// fixed random weighting.
pub fn check_op(
    name: &'static str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    f: &OpBuilder,
) -> OpCheck {
    let forward = |bufs: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        let tape = Tape::new();
        let tensors: Vec<Tensor> = inputs
            .iter()
            .zip(bufs)
            .map(|((shape, _), data)| tape.param(shape, data.clone()).expect("input"))
            .collect();
        let out = f(&tape, &tensors).expect("op forward");
        (out.shape(), out.value())
    };

    let input_bufs: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (out_shape, out_value) = forward(&input_bufs);
    let mut wrng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let weights: Vec<f64> = (0..out_value.len())
        .map(|_| wrng.random_range(-1.0..1.0))
        .collect();

    let scalar = |bufs: &[Vec<f64>]| -> f64 {
        let (_, v) = forward(bufs);
        v.iter().zip(&weights).map(|(a, w)| a * w).sum()
    };

    // Analytic gradients through the tape.
    let tape = Tape::new();
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| tape.param(shape, data.clone()).expect("input"))
        .collect();
    let out = f(&tape, &tensors).expect("op forward");
    let w = tape.constant(&out_shape, weights.clone()).expect("weights");
    let loss = out.mul(w).expect("weighting").sum(None).expect("sum");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let numeric = central_differences(&input_bufs, h, scalar);
    OpCheck {
        name,
        max_err: max_rel_err(&analytic, &numeric),
    }
}

fn rand_buf(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    (
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
}

/// Away-from-zero random buffer for ops with a kink at the origin.
fn rand_buf_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    (
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..2.0);
                if rng.random_range(0.0..1.0) < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect(),
    )
}

/// Gradient-check every differentiable tensor op at random inputs.
pub fn check_all_ops(seed: u64, h: f64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<(&'static str, Vec<(Vec<usize>, Vec<f64>)>, OpBuilder)> = Vec::new();

    checks.push((
        "add",
        vec![rand_buf(&mut rng, &[3, 4]), rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| t[0].add(t[1])),
    ));
    checks.push((
        "sub",
        vec![rand_buf(&mut rng, &[3, 4]), rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| t[0].sub(t[1])),
    ));
    checks.push((
        "mul",
        vec![rand_buf(&mut rng, &[3, 4]), rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| t[0].mul(t[1])),
    ));
    checks.push((
        "neg",
        vec![rand_buf(&mut rng, &[5])],
        Box::new(|_, t| Ok(t[0].neg())),
    ));
    checks.push((
        "scale",
        vec![rand_buf(&mut rng, &[5])],
        Box::new(|_, t| Ok(t[0].scale(-1.7))),
    ));
    checks.push((
        "matmul_2d",
        vec![rand_buf(&mut rng, &[3, 4]), rand_buf(&mut rng, &[4, 2])],
        Box::new(|_, t| t[0].matmul(t[1])),
    ));
    checks.push((
        "matmul_batched",
        vec![rand_buf(&mut rng, &[2, 3, 4]), rand_buf(&mut rng, &[2, 4, 2])],
        Box::new(|_, t| t[0].matmul(t[1])),
    ));
    checks.push((
        "transpose",
        vec![rand_buf(&mut rng, &[2, 3, 4])],
        Box::new(|_, t| t[0].transpose(0, 2)),
    ));
    checks.push((
        "reshape",
        vec![rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| t[0].reshape(&[2, 6])),
    ));
    checks.push((
        "concat",
        vec![rand_buf(&mut rng, &[2, 3]), rand_buf(&mut rng, &[2, 2])],
        Box::new(|tape, t| tape.concat(t, 1)),
    ));
    checks.push((
        "slice",
        vec![rand_buf(&mut rng, &[4, 5])],
        Box::new(|_, t| t[0].slice(1, 1, 3)),
    ));
    checks.push((
        "embedding_lookup",
        vec![rand_buf(&mut rng, &[4, 3])],
        Box::new(|_, t| t[0].embedding_lookup(&[Some(1), None, Some(3), Some(1)])),
    ));
    checks.push((
        "softmax",
        vec![rand_buf(&mut rng, &[3, 5])],
        Box::new(|_, t| t[0].softmax(1)),
    ));
    checks.push((
        "log_softmax",
        vec![rand_buf(&mut rng, &[3, 5])],
        Box::new(|_, t| t[0].log_softmax(1)),
    ));
    checks.push((
        "layer_norm",
        vec![rand_buf(&mut rng, &[3, 8])],
        Box::new(|_, t| t[0].layer_norm(1)),
    ));
    checks.push((
        "relu",
        vec![rand_buf_off_zero(&mut rng, &[4, 4])],
        Box::new(|_, t| Ok(t[0].relu())),
    ));
    checks.push((
        "gelu",
        vec![rand_buf(&mut rng, &[4, 4])],
        Box::new(|_, t| Ok(t[0].gelu())),
    ));
    checks.push((
        "sigmoid",
        vec![rand_buf(&mut rng, &[4, 4])],
        Box::new(|_, t| Ok(t[0].sigmoid())),
    ));
    checks.push((
        "tanh",
        vec![rand_buf(&mut rng, &[4, 4])],
        Box::new(|_, t| Ok(t[0].tanh())),
    ));
    checks.push((
        "dropout",
        vec![rand_buf(&mut rng, &[6, 6])],
        Box::new(|_, t| t[0].dropout(0.4, true, 1234)),
    ));
    checks.push((
        "masked_fill",
        vec![rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| {
            let mask = [
                true, false, false, true, false, false, true, false, false, false, true, false,
            ];
            t[0].masked_fill(&mask, 3.5)
        }),
    ));
    checks.push((
        "sum_axis",
        vec![rand_buf(&mut rng, &[3, 4, 2])],
        Box::new(|_, t| t[0].sum(Some(1))),
    ));
    checks.push((
        "sum_all",
        vec![rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| t[0].sum(None)),
    ));
    checks.push((
        "mean_axis",
        vec![rand_buf(&mut rng, &[3, 4, 2])],
        Box::new(|_, t| t[0].mean(Some(2))),
    ));
    checks.push((
        "mean_all",
        vec![rand_buf(&mut rng, &[3, 4])],
        Box::new(|_, t| t[0].mean(None)),
    ));
    checks.push((
        "expand_leading",
        vec![rand_buf(&mut rng, &[4])],
        Box::new(|_, t| t[0].expand_leading(3)),
    ));

    checks
        .into_iter()
        .map(|(name, inputs, f)| check_op(name, &inputs, h, &f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for check in check_all_ops(7, 1e-5) {
            assert!(
                check.max_err < 1e-4,
                "op {} max relative error {}",
                check.name,
                check.max_err
            );
        }
    }
}

