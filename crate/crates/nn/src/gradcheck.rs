//! Central finite-difference verification of tape gradients (64-bit).

use crate::error::NnError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that gradients near zero are
/// compared absolutely at this scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(at);
        }
    }
}

/// Compares tape gradients of the scalar `f` w.r.t. every element of
/// `params` against central differences with step `eps`.
pub fn grad_check<F, E>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<NnError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut work = params.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(params[ti].shape().to_vec());
        let analytic = grads.wrt(*var).unwrap_or(&zero).clone();
        for e in 0..params[ti].len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            report.record((ti, e), analytic.data()[e], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// [`grad_check`] over every tensor of a parameter store, for functions that
/// bind parameters with [`Tape::param`].
pub fn grad_check_store<F, E>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<NnError>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let analytic = tape.backward(out)?.param_grads(store);

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for ti in 0..store.len() {
        for e in 0..store.tensors()[ti].len() {
            let orig = work.tensors()[ti].data()[e];
            work.tensors_mut()[ti].data_mut()[e] = orig + eps;
            let plus = {
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                t.value(o).item()
            };
            work.tensors_mut()[ti].data_mut()[e] = orig - eps;
            let minus = {
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                t.value(o).item()
            };
            work.tensors_mut()[ti].data_mut()[e] = orig;
            report.record((ti, e), analytic[ti].data()[e], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
