use std::sync::Arc;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so coordinates whose
/// gradient is (numerically) zero compare in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of a scalar `f` against central
/// differences `(f(p+h) - f(p-h)) / 2h`.
///
/// `coords` restricts the check to `(param, element)` pairs; `None` checks
/// every element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = ps.iter().map(|p| tape.var(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(Arc::new(p.clone()))).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for &(pi, ei) in coords {
        let analytic = grads.get(vars[pi]).map_or(0.0, |g| g[ei]);
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!("gradient of param {pi} element {ei} is not finite")));
        }
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + h;
        let up = eval(&work)?;
        work[pi].data_mut()[ei] = orig - h;
        let down = eval(&work)?;
        work[pi].data_mut()[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(GradCheck { max_rel_err: worst, checked: coords.len() })
}
