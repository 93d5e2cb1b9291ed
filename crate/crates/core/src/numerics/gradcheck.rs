use super::{NumericsError, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Entries whose gradients are both below this magnitude are compared
/// against it instead of against themselves.
const REL_FLOOR: f64 = 1e-6;

/// Compares backward gradients of `f` with central differences
/// `(f(p + h) − f(p − h)) / 2h` for every entry of `params`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`. Parameter values are
/// restored afterwards; gradients in `store` are left holding the analytic
/// result.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, NumericsError>,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward(loss, store)?;
    }
    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        Ok(f(&tape, store)?.item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for &id in params {
        for i in 0..store.value(id).len() {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.grad(id).data()[i];
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
