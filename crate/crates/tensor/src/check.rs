//! Central finite-difference gradient checks.

use crate::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over the probed coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|)` over the probed sub-vector.
    pub vector_rel_err: f64,
}

/// Relative error with a floor on the denominator so tiny gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the autodiff gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar on a fresh graph given the leaf holding `x`. Only the
/// coordinates in `probe` are perturbed (all of them when `None`).
pub fn check_gradient<F>(x: &Tensor<f64>, step: f64, probe: Option<&[usize]>, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf);
    let grads = g.backward(out);
    let analytic = grads.get_or_zeros(leaf, x.shape());

    let eval = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf);
        g.value(out).item()
    };

    let all: Vec<usize>;
    let idx = match probe {
        Some(p) => p,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        vector_rel_err: 0.0,
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &i in idx {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        diff += (a - numeric) * (a - numeric);
        na += a * a;
        nn += numeric * numeric;
        if e > worst.max_rel_err || (i == idx[0] && worst.max_rel_err == 0.0) {
            worst = GradCheck {
                max_rel_err: e,
                worst_index: i,
                analytic: a,
                numeric,
                vector_rel_err: 0.0,
            };
        }
    }
    worst.vector_rel_err = diff.sqrt() / f64::max(na.sqrt().max(nn.sqrt()), 1e-12);
    worst
}
