use alloc::string::String;

use super::params::ParamSet;
use super::session::Session;
use super::tape::Var;
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn loss_value<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::eval(params);
    let v = f(&mut s)?;
    let t = s.value(v);
    if t.len() != 1 {
        bail!(Dimension, "grad_check: function must return a single value");
    }
    let x = t.data()[0];
    if !x.is_finite() {
        bail!(Numeric, "grad_check: non-finite loss {x}");
    }
    Ok(x)
}

/// Compare tape gradients with central differences over every trainable element.
///
/// The error per element is `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`;
/// the report carries the maximum.
pub fn grad_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::eval(params);
        let loss = f(&mut s)?;
        if !s.value(loss).data()[0].is_finite() {
            bail!(Numeric, "grad_check: non-finite loss");
        }
        s.backward(loss)?
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let names: alloc::vec::Vec<String> = params.trainable_names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = loss_value(&probe, &f)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = loss_value(&probe, &f)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
