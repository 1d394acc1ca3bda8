#![allow(dead_code)]

use longattn_core::tensor::{finite_diff_grad, max_relative_error};
use longattn_core::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Fixed, irregular weights used to reduce a tensor output to a scalar loss.
fn probe(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i * 7919 + 13) % 29) as f64 / 29.0 - 0.45)
}

fn scalar_loss(
    tape: &mut Tape,
    inputs: &[Tensor],
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(tape, &vars).unwrap();
    if tape.shape(out).is_empty() {
        return (vars, out);
    }
    let w = tape.constant(probe(tape.shape(out)));
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum(weighted).unwrap();
    (vars, loss)
}

/// Largest elementwise relative error between backward() and central
/// differences, over every input.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let (vars, loss) = scalar_loss(&mut tape, inputs, &f);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[i] = x.clone();
                let mut t = Tape::new();
                let (_, l) = scalar_loss(&mut t, &perturbed, &f);
                t.value(l).item()
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(max_relative_error(&grads.wrt(*var), &numeric));
    }
    worst
}

/// Forward value of `f` on `inputs` as constants.
pub fn eval(inputs: &[Tensor], f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).clone()
}
