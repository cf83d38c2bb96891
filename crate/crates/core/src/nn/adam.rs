use super::params::{Grads, ParamStore};
use super::NnError;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves the store untouched.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig) -> Result<(), NnError> {
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient(store.get(id).name.clone()));
            }
        }
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for id in store.ids() {
        let Some(g) = grads.get(id) else { continue };
        let p = store.get_mut(id);
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let m = p.adam.m.as_mut_slice();
        let v = p.adam.v.as_mut_slice();
        for (i, (w, &gi)) in p.value.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
