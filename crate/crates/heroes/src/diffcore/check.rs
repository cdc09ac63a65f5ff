//! Finite-difference gradient checking.
//!
//! The numeric side re-evaluates the loss with each parameter entry
//! perturbed by `+/-eps` on a fresh tape, so it shares no state with the
//! analytic backward pass it verifies.

use super::tensor::Tensor;
use super::{Binding, DiffError, ParamSet, Tape, Var};

/// Worst observed disagreement between analytic and central-difference
/// gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst entry, if any parameter exists.
    pub worst_param: Option<String>,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients of a scalar loss against central finite
/// differences with step `eps`.
///
/// `build` must construct the loss from the bound parameters alone so that
/// re-invoking it sees perturbed values. Relative error per entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(
    params: &mut ParamSet,
    mut build: F,
    eps: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&Tape, &Binding) -> Result<Var, DiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(DiffError::Domain {
            op: "gradient_check",
            detail: "eps must lie in [1e-7, 1e-3]",
        });
    }

    // Analytic pass.
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let binding = tape.bind(params);
        let root = build(&tape, &binding)?;
        tape.value(root).check_finite("gradient_check loss")?;
        tape.backward(root)?;
        params
            .ids()
            .map(|id| tape.grad(binding.var(id)).data().to_vec())
            .collect()
    };

    let eval = |params: &ParamSet| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let binding = tape.bind(params);
        let root = build(&tape, &binding)?;
        Ok(tape.item(root))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (id, grads) in params.ids().collect::<Vec<_>>().into_iter().zip(&analytic) {
        for entry in 0..grads.len() {
            let original = params.get(id).value.data()[entry];

            params.get_mut(id).value.data_mut()[entry] = original + eps;
            let plus = eval(params);
            params.get_mut(id).value.data_mut()[entry] = original - eps;
            let minus = eval(params);
            params.get_mut(id).value.data_mut()[entry] = original;

            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => {
                    return Err(DiffError::NonFinitePerturbed {
                        param: params.get(id).name.clone(),
                        entry,
                    })
                }
            };

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[entry];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(params.get(id).name.clone());
                report.worst_entry = entry;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper used by primitive-level property tests: checks the
/// gradient of `sum(f(x))` with respect to a single leaf vector input.
pub fn check_unary_primitive<F>(input: &[f64], f: F, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&Tape, Var) -> Result<Var, DiffError>,
{
    let mut set = ParamSet::new();
    let x = set.add("x", Tensor::vector(input.to_vec()));
    let report = gradient_check(
        &mut set,
        |tape, binding| {
            let y = f(tape, binding.var(x))?;
            Ok(tape.sum(y))
        },
        eps,
    )?;
    Ok(report.max_rel_err)
}
