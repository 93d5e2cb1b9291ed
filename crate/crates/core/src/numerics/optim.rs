use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. The learning rate is passed per step so a
/// schedule can drive it.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            }
            if lr == 0.0 {
                continue;
            }
            let value = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .ids()
        .map(|id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::matrix(1, 2, vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            store.zero_grad();
            let x = store.value(id).data().to_vec();
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            store.grad_mut(id).data_mut().copy_from_slice(&g);
            adam.step(&mut store, 0.05);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        store.grad_mut(id).data_mut()[0] = 123.0;
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.1);
        assert!((store.value(id).item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        store.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.grad(id).data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
