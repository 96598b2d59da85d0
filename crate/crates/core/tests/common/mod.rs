//! Shared test helpers: finite-difference gradient checking at f64, and
//! small dataset builders.

#![allow(dead_code)]

use mmfusion::tape::{Tape, Var};
use mmfusion::tensor::Tensor;
use rand::Rng;

pub const FD_H: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

/// Random tensor with entries in [lo, hi].
pub fn rand_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random tensor bounded away from zero (for ops with a kink at 0).
pub fn rand_tensor_away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * (0.1 + rng.random::<f64>())
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Compare the analytic gradient of a scalar-valued graph against central
/// differences, for every element of every input. `build` receives the input
/// leaves and must return a scalar variable.
///
/// Returns the worst relative error observed.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).numel(), 1, "graph must end in a scalar");
        let value = tape.value(out).item();
        let (grads, _) = tape.backward(out).expect("backward");
        let analytic = vars.iter().map(|&v| grads.wrt(v, &tape)).collect();
        (value, analytic)
    };

    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= FD_H;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_H);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs()));
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel <= MAX_REL_ERR,
                "input {ti} element {i}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
    worst
}

/// Project a (possibly non-scalar) output onto a fixed random direction so the
/// checked gradient exercises every output element with distinct weights.
pub fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(y, w).expect("projection shape");
    tape.sum(p)
}
