//! Central finite-difference oracle shared by the gradient tests.
#![allow(dead_code)]

use emonet_core::autodiff::{Tape, Var};
use emonet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces `out` to a scalar by a fixed pseudo-random projection so that
/// every output element contributes a distinct weight.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed);
    let w = uniform(&mut r, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-9 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

/// Compares backward gradients of `f` with central differences for every
/// element of every input. Returns the largest relative error observed.
#[allow(clippy::needless_range_loop)]
pub fn max_grad_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + EPS;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - EPS;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}
