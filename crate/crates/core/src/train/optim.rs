use crate::params::{Grads, ParamSet};
use crate::tensor::Scalar;

/// Rescales `g` in place so its global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(g: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(T::from_f64(max_norm / norm));
    }
    norm
}

/// AdamW with decoupled weight decay, in the form
/// `p <- p - lr*wd*p; p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Grads<T>,
    pub v: Grads<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, betas: [f64; 2]) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &Grads<T>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors[i].data();
            let m = self.m.tensors[i].data_mut();
            let v = self.v.tensors[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                *w = T::from_f64(w.to_f64() * decay - step);
            }
        }
    }
}
