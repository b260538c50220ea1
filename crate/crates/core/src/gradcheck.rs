//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative error threshold for [`GradCheckReport::passed`].
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions {
            tolerance,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn scalar_loss(params: &ParamSet<f64>, build: &impl Fn(&mut Graph<'_, f64>) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::with_params(params, false);
    let loss = build(&mut g)?;
    let v = g
        .value(loss)
        .item()
        .ok_or_else(|| Error::NotScalar(g.shape(loss).to_vec()))?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok(v)
}

/// Compares the gradients from [`Graph::backward`] with central differences
/// for every parameter in `params`.
///
/// `build` must construct the same scalar loss every time it is called; any
/// randomness (dropout masks) has to come from a generator it seeds itself.
pub fn grad_check<F>(params: &ParamSet<f64>, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::with_params(params, false);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
        tolerance: opts.tolerance,
    };
    for id in params.ids() {
        let n = params.get(id).numel();
        let stride = match opts.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let numeric = central_difference(&mut work, id, i, opts.step, &build)?;
            let exact = analytic.get(id).map_or(0.0, |g| g[i]);
            if !exact.is_finite() {
                return Err(Error::NonFinite("grad_check analytic gradient".into()));
            }
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(opts.floor);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

fn central_difference(
    work: &mut ParamSet<f64>,
    id: ParamId,
    index: usize,
    step: f64,
    build: &impl Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
) -> Result<f64> {
    let original = work.get(id).data()[index];
    work.get_mut(id).data_mut()[index] = original + step;
    let plus = scalar_loss(work, build);
    work.get_mut(id).data_mut()[index] = original - step;
    let minus = scalar_loss(work, build);
    work.get_mut(id).data_mut()[index] = original;
    Ok((plus? - minus?) / (2.0 * step))
}
