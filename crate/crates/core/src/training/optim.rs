//! Adam with global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::numerics::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// Completed updates.
    pub t: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies the gradients stored in `params[*].grad` after clipping them
    /// in place; parameters without a gradient are left alone. Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<f64> {
        self.m.check_same_layout(params)?;
        let norm = clip_gradients(params, self.clip)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let tensors = params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut());
        for (((_, p), (_, m)), (_, v)) in tensors {
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(norm)
    }
}

/// Scales every stored gradient so the joint L2 norm is at most `clip`.
/// Returns the norm before scaling; non-finite entries are an error naming
/// the parameter.
pub fn clip_gradients(params: &mut ParameterSet, clip: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, t) in params.iter() {
        if let Some(g) = &t.grad {
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    param: format!("{name}[{bad}]"),
                    detail: "non-finite gradient".into(),
                });
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = clip / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(norm)
}
