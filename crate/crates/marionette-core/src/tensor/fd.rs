//! Central finite-difference gradient checking.
//!
//! Independent oracle for every backward implementation in this crate: a
//! probed input is perturbed one element at a time and the numerical
//! directional derivative is compared against the autodiff gradient. Lives in
//! the library (not a test file) because several module test suites and the
//! acceptance gates call it.

use super::{ops, Buf, Tensor};

/// Maximum relative error between autodiff and central differences for a
/// function of a single probed input.
///
/// Non-scalar outputs are reduced with a fixed quasi-random weighting so the
/// full Jacobian action is exercised, not just the row sums.
pub fn max_rel_err(input: &Buf, fd_eps: f64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let weights = probe_weights_for(&f, input);
    let loss = |buf: &Buf| -> f64 {
        let x = Tensor::constant(buf.clone());
        let y = f(&x);
        y.data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
    };

    let leaf = Tensor::leaf(input.clone());
    let y = f(&leaf);
    let w = Tensor::constant(Buf::new(y.shape().to_vec(), weights.clone()));
    let scalar = ops::sum_all(&ops::mul(&y, &w));
    scalar.backward();
    let analytic = leaf.grad().expect("probed input received no gradient");

    let mut worst: f64 = 0.0;
    let base = input.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += fd_eps;
        let mut minus = base.clone();
        minus[i] -= fd_eps;
        let num = (loss(&Buf::new(input.shape().to_vec(), plus))
            - loss(&Buf::new(input.shape().to_vec(), minus)))
            / (2.0 * fd_eps);
        let ana = analytic.data()[i];
        let denom = num.abs().max(ana.abs()).max(1e-4);
        worst = worst.max((num - ana).abs() / denom);
    }
    worst
}

/// Asserts the finite-difference check passes at `tol`.
pub fn check_unary(input: &Buf, fd_eps: f64, tol: f64, f: impl Fn(&Tensor) -> Tensor) {
    let err = max_rel_err(input, fd_eps, &f);
    assert!(
        err <= tol,
        "finite-difference mismatch: max rel err {err:.3e} > tol {tol:.1e}"
    );
}

fn probe_weights_for(f: &impl Fn(&Tensor) -> Tensor, input: &Buf) -> Vec<f64> {
    let y = f(&Tensor::constant(input.clone()));
    (0..y.buf().numel())
        .map(|i| 0.25 + ((i as f64 * 0.7311) + 0.13).sin() * 0.2)
        .collect()
}
