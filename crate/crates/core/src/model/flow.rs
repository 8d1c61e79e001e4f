//! Rectified-flow interpolation and the velocity objective.

use crate::codec::VideoLatent;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseState {
    pub t: f64,
    pub x_t: VideoLatent,
    pub target_v: VideoLatent,
}

/// `x_t = (1 - t) x0 + t noise`, `v = noise - x0`.
pub fn flow_pair(x0: &VideoLatent, noise: &VideoLatent, t: f64) -> Result<NoiseState> {
    if !x0.same_shape(noise) || x0.data.len() != noise.data.len() {
        return Err(Error::DimensionMismatch("flow pair shapes differ".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("noise level {t}")));
    }
    let tf = t as f32;
    let mut x_t = x0.clone();
    let mut v = x0.clone();
    for ((x, vv), (a, n)) in x_t
        .data
        .iter_mut()
        .zip(&mut v.data)
        .zip(x0.data.iter().zip(&noise.data))
    {
        *x = if t == 0.0 {
            *a
        } else if t == 1.0 {
            *n
        } else {
            (1.0 - tf) * a + tf * n
        };
        *vv = n - a;
    }
    Ok(NoiseState {
        t,
        x_t,
        target_v: v,
    })
}

/// Mean of `(pred - target)^2` over entries with a nonzero mask.
pub fn mse_loss(pred: &VideoLatent, target: &VideoLatent, mask: &[f32]) -> Result<f64> {
    if !pred.same_shape(target) || mask.len() != pred.data.len() {
        return Err(Error::DimensionMismatch("loss shapes differ".into()));
    }
    let mut acc = 0.0f64;
    let mut n = 0.0f64;
    for ((p, t), m) in pred.data.iter().zip(&target.data).zip(mask) {
        if *m != 0.0 {
            let e = (*p as f64) - (*t as f64);
            acc += *m as f64 * e * e;
            n += *m as f64;
        }
    }
    if n == 0.0 {
        return Err(Error::Empty("loss mask".into()));
    }
    Ok(acc / n)
}
