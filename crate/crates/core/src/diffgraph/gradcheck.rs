use super::{GraphError, Gradients, ParamStore, Tape, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Checks every coordinate of every parameter in `store`.
///
/// `build` records a scalar loss on a fresh tape. The relative error per
/// coordinate is `|a - n| / max(1e-8, |a| + |n|)` with `n` the central
/// difference at step `eps`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, build: F) -> Result<GradCheckReport, GraphError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, GraphError>,
{
    let mut analytic = Gradients::for_store(store);
    {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        tape.backward(loss, &mut analytic)?;
    }

    let eval = |s: &ParamStore| -> Result<f64, GraphError> {
        let mut tape = Tape::new(s);
        let loss = build(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in store.ids() {
        let grad = analytic.dense(id);
        for k in 0..grad.numel() {
            let original = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = original - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
