use super::ParamSet;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference gradient of `loss` over every parameter of `params`.
pub fn finite_difference_gradient<P, F>(params: &P, h: f64, mut loss: F) -> P
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.tensors()[ti][k];
            probe.tensors_mut()[ti][k] = orig + h;
            let plus = loss(&probe);
            probe.tensors_mut()[ti][k] = orig - h;
            let minus = loss(&probe);
            probe.tensors_mut()[ti][k] = orig;
            grad.tensors_mut()[ti][k] = (plus - minus) / (2.0 * h);
        }
    }
    grad
}

pub fn worst_relative_error<P: ParamSet>(analytic: &P, numeric: &P) -> f64 {
    analytic
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .flat_map(|(a, n)| a.iter().zip(n.iter()).map(|(a, n)| relative_error(*a, *n)))
        .fold(0.0, f64::max)
}
