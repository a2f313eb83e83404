use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `build` with central differences of step
/// `h`. `build` receives a fresh tape and one leaf per input and must return a
/// scalar. When `max_entries` is set, only that many evenly strided entries
/// of each input are perturbed.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    max_entries: Option<usize>,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for e in (0..n).step_by(stride) {
            let orig = input.values()[e];
            work[idx].values_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[idx].values_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[idx].values_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx][e];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
