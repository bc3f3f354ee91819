use crate::autograd::{Gradients, Var};
use crate::nn::ParamStore;
use crate::tensor::Real;

/// Adam with bias-corrected moment estimates, one instance per parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { learning_rate, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update `store` from the gradients of its bound variables; parameters the
    /// loss does not reach keep their moments and values.
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, vars: &[Var<'_, T>], grads: &Gradients<T>) {
        assert_eq!(vars.len(), store.len(), "bound variables do not match the store");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (param, var)) in store.params_mut().iter_mut().zip(vars).enumerate() {
            let Some(g) = grads.get(*var) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in param.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = T::lit(w.f64() - update);
            }
        }
    }
}
