use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max |analytic − numeric| / max(1, |analytic|) over every coordinate.
    pub max_rel_error: f64,
    /// (input, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn eval<F, E>(f: &F, inputs: &[Tensor]) -> std::result::Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: From<DiffError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let value = f(&tape, &vars)?.item()?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DiffError::NonFinite(format!("objective evaluated to {value}")).into())
    }
}

/// Central-difference gradient check of a scalar function of `inputs`.
///
/// `f` is re-run on a fresh tape for every perturbed coordinate, so it must be
/// deterministic.
pub fn finite_diff_check<F, E>(f: F, inputs: &[Tensor], eps: f64) -> std::result::Result<GradCheck, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: From<DiffError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let value = root.item()?;
    if !value.is_finite() {
        return Err(DiffError::NonFinite(format!("objective evaluated to {value}")).into());
    }
    let grads = tape.backward(root)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (coord, &a) in analytic.iter().enumerate() {
            let original = inputs[which].data()[coord];
            probe[which].data_mut()[coord] = original + eps;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[coord] = original - eps;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[coord] = original;

            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, coord));
            }
        }
    }
    Ok(report)
}
