//! Central finite-difference verification of reverse-mode gradients.

mod suite;

pub use suite::{
    default_cases, full_model_case, run as run_suite, Case, CaseResult, SuiteReport, TOLERANCE,
};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, as a fraction of the largest
/// difference quotient among the checked coordinates.
///
/// Central differences carry an O(h²) truncation error set by the third
/// derivative, which does not shrink with the gradient. Coordinates whose
/// gradient sits orders of magnitude below the rest of the case are compared
/// against that scale instead of against their own magnitude.
pub const SCALE_FLOOR: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(1e-12)
}

fn scalar_output(g: &Graph, v: Var) -> Result<f64> {
    g.value(v).item().map_err(|_| {
        Error::Usage(format!(
            "gradient check needs a scalar function, got {:?}",
            g.shape(v)
        ))
    })
}

/// Maximum relative error (see [`SCALE_FLOOR`]) between the tape gradient of a scalar function and
/// central differences over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_params(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        &coords_of(0, &coords),
        h,
    )
}

fn coords_of(param: usize, coords: &[usize]) -> Vec<(usize, usize)> {
    coords.iter().map(|&c| (param, c)).collect()
}

/// Like [`grad_check`] for a function of several tensors, checking only the
/// listed `(tensor, flat index)` coordinates.
pub fn grad_check_params<F>(
    f: F,
    params: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out)
    };

    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;

    let mut pairs = Vec::with_capacity(coords.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for &(p, i) in coords {
        let analytic = grads.get(vars[p]).map_or(0.0, |t| t.data()[i]);
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - h;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        pairs.push((analytic, numeric));
    }
    let scale = pairs.iter().map(|(_, n)| n.abs()).fold(0.0, f64::max);
    Ok(pairs
        .iter()
        .map(|&(a, n)| relative_error(a, n, SCALE_FLOOR * scale))
        .fold(0.0, f64::max))
}
