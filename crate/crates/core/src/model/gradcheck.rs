//! Directional finite-difference checks of tape gradients.

use rand_distr::{Distribution, StandardNormal};

use super::autodiff::{Tape, Var};
use super::param::{BoundParams, ParamVector};
use crate::error::{Error, Result};
use crate::rng;

/// Denominator floor so directions with a vanishing derivative are judged
/// on absolute error.
pub const REL_FLOOR: f64 = 1e-8;

/// Worst relative error between `grad . u` and the central difference
/// `(f(x + h u) - f(x - h u)) / 2h` over `directions` random unit vectors `u`.
pub fn directional_error(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    grad: &[f64],
    directions: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if grad.len() != x.len() {
        return Err(Error::Shape("gradient and point differ in length".into()));
    }
    let mut r = rng::stream(&[seed]);
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for _ in 0..directions {
        let mut u: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        u.iter_mut().for_each(|v| *v /= norm);
        for ((pi, xi), ui) in p.iter_mut().zip(x).zip(&u) {
            *pi = xi + h * ui;
        }
        let fp = f(&p)?;
        for ((pi, xi), ui) in p.iter_mut().zip(x).zip(&u) {
            *pi = xi - h * ui;
        }
        let fm = f(&p)?;
        let fd = (fp - fm) / (2.0 * h);
        let an: f64 = grad.iter().zip(&u).map(|(g, v)| g * v).sum();
        let err = (fd - an).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
        if !err.is_finite() {
            return Err(Error::NonFinite("gradient check"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the parameter gradient of a scalar loss recorded by `loss`.
pub fn check_params(
    params: &ParamVector,
    loss: &dyn Fn(&mut Tape, &BoundParams) -> Result<Var>,
    directions: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let eval = |data: &[f64]| -> Result<f64> {
        let mut q = params.clone();
        q.data.copy_from_slice(data);
        let mut tape = Tape::new();
        let p = q.bind(&mut tape);
        let l = loss(&mut tape, &p)?;
        Ok(tape.scalar(l))
    };
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = loss(&mut tape, &p)?;
    let grads = tape.backward(l)?;
    let g = p.flat_grad(&tape, &grads);
    directional_error(&eval, &params.data, &g, directions, h, seed)
}
