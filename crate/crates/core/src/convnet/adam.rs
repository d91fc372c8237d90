use super::real::Real;
use super::spec::{NetworkParams, NetworkSpec};

/// First/second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: NetworkParams<T>,
    pub v: NetworkParams<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(spec: &NetworkSpec) -> Self {
        Self {
            m: NetworkParams::zeros(spec),
            v: NetworkParams::zeros(spec),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update in place.
pub fn adam_step<T: Real>(params: &mut NetworkParams<T>, grads: &NetworkParams<T>, state: &mut AdamState<T>, lr: f64) {
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let correction1 = 1.0 - b1.powi(state.t as i32);
    let correction2 = 1.0 - b2.powi(state.t as i32);
    let buffers = params
        .slices_mut()
        .zip(grads.slices())
        .zip(state.m.slices_mut().zip(state.v.slices_mut()));
    for ((w, g), (m, v)) in buffers {
        for i in 0..w.len() {
            let gi = g[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let m_hat = mi / correction1;
            let v_hat = vi / correction2;
            w[i] = T::lit(w[i].as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
}
