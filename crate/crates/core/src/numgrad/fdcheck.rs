use super::{NumError, ParamStore, Parameter, Tape, Var};

/// Absolute floor in the relative-error denominator so that gradients which are
/// both essentially zero do not count as mismatches.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients with central differences `(f(θ+εe) − f(θ−εe)) / 2ε`.
///
/// `select` chooses which parameters are probed; `per_param` caps the number of
/// evenly spaced elements probed in each (all when `None`).
pub fn finite_diff_check<L>(
    store: &ParamStore<f64>,
    eps: f64,
    select: impl Fn(&Parameter<f64>) -> bool,
    per_param: Option<usize>,
    loss: L,
) -> Result<FdReport, NumError>
where
    L: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var, NumError>,
{
    if !(eps > 0.0) {
        return Err(NumError::Contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let v = loss(s, &mut tape)?;
        Ok(tape.value(v).item())
    };
    let mut tape = Tape::new();
    let out = loss(store, &mut tape)?;
    let base = tape.value(out).item();
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(NumError::Contract("loss is not deterministic".into()));
    }
    let grads = tape.backward(out)?;

    let mut probe = store.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| select(p)).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let indices: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
