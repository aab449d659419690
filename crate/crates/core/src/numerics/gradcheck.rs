use super::autodiff::{Graph, Var};
use super::param::Parameterized;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over entries of `|ad - fd| / (|fd| + floor)`
    pub max_rel_error: f64,
    /// flat index of the worst entry in declaration order
    pub worst_index: usize,
    pub worst_autodiff: f64,
    pub worst_fd: f64,
    pub entries: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Max relative error between tape gradients and central differences
/// (`h = 1e-5`, denominator `|fd| + 1e-12`).
pub fn grad_check<M, F>(model: &mut M, f: F) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&M, &Graph) -> Result<Var>,
{
    grad_check_report(model, f, 1e-12).map(|r| r.max_rel_error)
}

/// Like [`grad_check`] with a configurable denominator floor.
pub fn grad_check_report<M, F>(model: &mut M, f: F, floor: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&M, &Graph) -> Result<Var>,
{
    let g = Graph::new();
    let loss = f(model, &g)?;
    let grads = g.backward(&loss)?;
    let ad = grads.flat_for(model);

    let eval = |m: &M| -> Result<f64> {
        let v = f(m, &Graph::no_grad())?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("objective evaluated to {v}")))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_autodiff: 0.0,
        worst_fd: 0.0,
        entries: ad.len(),
    };
    let h = GRAD_CHECK_STEP;
    let mut flat = 0;
    let nparams = model.params().len();
    for pi in 0..nparams {
        let len = model.params()[pi].len();
        for j in 0..len {
            let orig = model.params()[pi].value.data()[j];
            model.params_mut()[pi].value.data_mut()[j] = orig + h;
            let fp = eval(model);
            model.params_mut()[pi].value.data_mut()[j] = orig - h;
            let fm = eval(model);
            model.params_mut()[pi].value.data_mut()[j] = orig;
            let fd = (fp? - fm?) / (2.0 * h);
            let rel = (ad[flat] - fd).abs() / (fd.abs() + floor);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_index = flat;
                report.worst_autodiff = ad[flat];
                report.worst_fd = fd;
            }
            flat += 1;
        }
    }
    Ok(report)
}
