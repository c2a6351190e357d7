//! Central finite-difference checks of tape gradients.

use super::params::{Bound, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::Domain("gradient check evaluated a non-finite value".into()));
    }
    Ok(value)
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
}

/// Finite-difference check over every coordinate of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParameterStore, f: F, step: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let mut grads = tape.backward(out)?;
    let analytic = store.collect_grads(&mut grads, &bound);

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let out = f(&mut tape, &bound)?;
        let value = tape.value(out).item()?;
        if !value.is_finite() {
            return Err(Error::Domain("gradient check evaluated a non-finite value".into()));
        }
        Ok(value)
    };

    let mut probe = store.clone();
    let mut report = Vec::new();
    for (p, g) in store.iter().zip(&analytic) {
        let mut worst: f64 = 0.0;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut_data(&p.name)?[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut_data(&p.name)?[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut_data(&p.name)?[i] = orig;
            worst = worst.max(relative_error(g.data()[i], (up - down) / (2.0 * step)));
        }
        report.push(ParamCheck {
            name: p.name.clone(),
            max_relative_error: worst,
            max_abs_gradient: g.data().iter().fold(0.0, |m, x| m.max(x.abs())),
        });
    }
    Ok(report)
}
