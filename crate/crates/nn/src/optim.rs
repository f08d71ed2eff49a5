use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `step` is the 1-based
/// step count after this update.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamMoments<T>,
    step: u64,
    cfg: &AdamConfig,
) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let c1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        Self {
            cfg,
            step: 0,
            moments: store
                .tensors()
                .iter()
                .map(|t| AdamMoments::zeros(t.len()))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        for ((p, g), st) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.moments.iter_mut())
        {
            adam_step(p.data_mut(), g.data(), st, self.step, &self.cfg);
        }
    }
}
