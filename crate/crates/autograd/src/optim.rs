use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adaptive-moment optimizer with bias correction (decoupled weight decay).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Parameters whose gradient is `None` are left untouched and their
    /// moments are not decayed.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.lr * c.weight_decay));
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let tensor = store.get_mut(ParamId::from_index(i)).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gv), mv), vv) in tensor.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps) + wd * *p;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        for _ in 0..2000 {
            let x = store.get(id).data().to_vec();
            let g = vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            opt.step(&mut store, &[Some(g)]);
        }
        let x = store.get(id).data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn missing_gradient_leaves_param_unchanged() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::full(&[3], 1.0));
        let b = store.add("b", Tensor::full(&[3], 1.0));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &[Some(vec![1.0; 3]), None]);
        assert_eq!(store.get(b).data(), &[1.0, 1.0, 1.0]);
    }
}
