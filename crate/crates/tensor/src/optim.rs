use crate::error::{Result, TensorError};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are laid out in the
/// store's parameter order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(TensorError::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.config.lr = lr;
        Ok(())
    }

    /// Applies one update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic_step(store: &mut ParamStore, opt: &mut Adam) {
        store.zero_grads();
        let id = store.id("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(store, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, store);
        opt.step(store);
    }

    #[test]
    fn one_step_matches_hand_recurrence() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store).unwrap();
        quadratic_step(&mut store, &mut opt);
        // g = 2; m = 0.1·2 = 0.2; v = 0.001·4 = 0.004; m̂ = 2; v̂ = 4
        let expected = 1.0 - 1e-3 * (2.0 / (4.0_f64.sqrt() + 1e-8));
        assert_eq!(store.get(store.id("w").unwrap()).value.item(), expected);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store).unwrap();
        opt.step(&mut store);
        assert_eq!(store.get(id).value.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let store = ParamStore::new();
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(matches!(Adam::new(cfg, &store), Err(TensorError::Config(_))));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            store.add("w", Tensor::scalar(1.3)).unwrap();
            let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
            (0..50)
                .map(|_| {
                    quadratic_step(&mut store, &mut opt);
                    store.get(store.id("w").unwrap()).value.item()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store).unwrap();
        for _ in 0..500 {
            quadratic_step(&mut store, &mut opt);
        }
        assert!(store.get(store.id("w").unwrap()).value.item().abs() < 1e-2);
    }
}
