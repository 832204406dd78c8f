//! Central finite-difference oracle for tape gradients.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Relative error `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of the scalar function `f` at `point` with
/// central differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate,
/// and returns the largest relative error.
pub fn check_gradients<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("check_gradients: step must be positive"));
    }
    let tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|&v| grads.get_or_zero(&tape, v))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&t, &vars)?;
        let v = t.value(out).item();
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (i, x) in point.iter().enumerate() {
        for j in 0..x.len() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of `f` with respect to every trainable parameter
/// in `store`. At most `max_coords` coordinates per parameter are probed
/// (evenly strided) to keep large models affordable.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    max_coords: usize,
) -> Result<f64>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if h <= 0.0 || max_coords == 0 {
        return Err(Error::invalid("check_param_gradients: bad step or budget"));
    }
    let mut work = store.clone();
    work.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, &work)?;
    tape.backward(loss)?.accumulate_into(&mut work);
    let analytic: Vec<Tensor<f64>> = work.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let t = Tape::new();
        let out = f(&t, s)?;
        let v = t.value(out).item();
        Ok(v)
    };
    let ids: Vec<(ParamId, usize, bool)> = work
        .iter()
        .map(|(id, p)| (id, p.value.len(), p.trainable))
        .collect();
    let mut worst = 0.0f64;
    for (k, (id, len, trainable)) in ids.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let stride = len.div_ceil(max_coords).max(1);
        for j in (0..len).step_by(stride) {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[j], numeric));
        }
    }
    Ok(worst)
}
