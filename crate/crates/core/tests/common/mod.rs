#![allow(dead_code)]

pub mod gradcases;

use momask_lab::ndmath::{Rng, Tape, Tensor, Var};
use momask_lab::Result;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-2;

/// Random array with entries uniform in [-1, 1].
pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<_>>()).unwrap()
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Worst relative error between backprop and central differences over every
/// input element, `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x.shape());
        for e in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Contracts an arbitrary-shaped output to a scalar with fixed random
/// weights so every output element influences the loss.
pub fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = Rng::new(seed);
    let w = tape.constant(rand_tensor(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}
