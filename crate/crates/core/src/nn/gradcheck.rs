//! Finite-difference gradient verification.
//!
//! Used by module tests and the acceptance suite to check analytic gradients
//! against central differences on sampled parameter coordinates.

use super::params::Var;
use super::tensor::{no_grad, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Check d(loss)/d(var) on `coords_per_var` sampled coordinates of each var.
///
/// `loss_fn` must read the vars' current values on every call. Relative error
/// uses max(|analytic|, |numeric|, floor) as the denominator.
pub fn gradcheck_loss(
    vars: &[&Var],
    coords_per_var: usize,
    rng: &mut ChaCha12Rng,
    loss_fn: impl Fn() -> Tensor,
    step: f64,
) -> GradCheckReport {
    let loss = loss_fn();
    let grads = loss.backward();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for var in vars {
        let value = var.value();
        let analytic = grads
            .wrt(&value)
            .unwrap_or_else(|| panic!("no gradient reached {}", var.name()))
            .to_vec();
        let base = value.data().to_vec();
        for _ in 0..coords_per_var.min(base.len()) {
            let i = rng.gen_range(0..base.len());
            let mut plus = base.clone();
            plus[i] += step;
            var.set_data(plus);
            let lp = no_grad(|| loss_fn()).item();
            let mut minus = base.clone();
            minus[i] -= step;
            var.set_data(minus);
            let lm = no_grad(|| loss_fn()).item();
            var.set_data(base.clone());
            let numeric = (lp - lm) / (2.0 * step);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            max_rel_err = max_rel_err.max((numeric - analytic[i]).abs() / denom);
            checked += 1;
        }
    }
    GradCheckReport { max_rel_err, checked }
}
