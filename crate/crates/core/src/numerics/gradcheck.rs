use alloc::string::String;
use alloc::vec::Vec;

use super::{evaluate_with_gradients, GradientMap, Objective, ParameterStore, Tape};
use crate::error::{Error, Result};

/// Central-difference gradient estimate.
#[derive(Clone, Debug)]
pub struct FiniteDifference {
    /// `(f(p+h) - f(p-h)) / 2h` per coordinate; 0 for skipped coordinates.
    pub grads: GradientMap,
    /// Coordinates whose `±h` probe changed the activation pattern of some
    /// kinked operation (ReLU, hinge, abs, norm at zero, CVaR threshold).
    pub skipped: Vec<(String, usize)>,
}

fn probe<O: Objective + ?Sized>(graph: &O, params: &ParameterStore) -> Result<(f64, Vec<i8>)> {
    let mut tape = Tape::with_kink_tracking();
    let out = graph.build(&mut tape, params)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("objective", &[], v.shape()));
    }
    Ok((v.item(), tape.kink_signature().unwrap_or_default().to_vec()))
}

fn selected(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let k = k.max(1);
            (0..k).map(|i| i * len / k).collect()
        }
        _ => (0..len).collect(),
    }
}

fn estimate<O: Objective + ?Sized>(
    graph: &O,
    params: &ParameterStore,
    h: f64,
    limit: Option<usize>,
) -> Result<FiniteDifference> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, base) = probe(graph, params)?;
    let mut grads = params.zeros_like();
    let mut skipped = Vec::new();
    let mut work = params.clone();
    for t in 0..params.len() {
        for i in selected(params.value_at(t).len(), limit) {
            let orig = params.value_at(t).data()[i];
            work.value_at_mut(t).data_mut()[i] = orig + h;
            let (fp, sp) = probe(graph, &work)?;
            work.value_at_mut(t).data_mut()[i] = orig - h;
            let (fm, sm) = probe(graph, &work)?;
            work.value_at_mut(t).data_mut()[i] = orig;
            if sp != base || sm != base {
                skipped.push((params.names()[t].clone(), i));
                continue;
            }
            grads.value_at_mut(t).data_mut()[i] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(FiniteDifference { grads, skipped })
}

/// Central-difference gradient of `graph` at `params`.
///
/// Coordinates within `h` of a kink are skipped and listed in
/// [`FiniteDifference::skipped`]; the analytic path uses the subgradient there.
pub fn finite_difference_gradient<O: Objective + ?Sized>(
    graph: &O,
    params: &ParameterStore,
    h: f64,
) -> Result<FiniteDifference> {
    estimate(graph, params, h, None)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(parameter, coordinate, analytic, numeric)` for failing coordinates.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares analytic and numeric gradients. A coordinate passes when the
/// absolute error is at most `abs_tol` or the relative error is at most
/// `rel_tol`. `limit` caps the coordinates probed per tensor (evenly spaced).
pub fn check_gradients<O: Objective + ?Sized>(
    graph: &O,
    params: &ParameterStore,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport> {
    let (_, analytic) = evaluate_with_gradients(graph, params)?;
    let fd = estimate(graph, params, h, limit)?;
    let mut report = GradCheckReport {
        skipped: fd.skipped.len(),
        ..GradCheckReport::default()
    };
    for t in 0..params.len() {
        for i in selected(params.value_at(t).len(), limit) {
            let name = &params.names()[t];
            if fd.skipped.iter().any(|(n, j)| n == name && *j == i) {
                continue;
            }
            let a = analytic.value_at(t).data()[i];
            let n = fd.grads.value_at(t).data()[i];
            let abs = (a - n).abs();
            let scale = f64::max(a.abs(), n.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
            if abs > abs_tol && rel > rel_tol {
                report.failures.push((name.clone(), i, a, n));
            }
        }
    }
    Ok(report)
}
