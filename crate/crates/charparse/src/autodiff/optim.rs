use super::params::ParamStore;
use super::tensor::{Element, Tensor};
use super::{AutodiffError, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate warmup over this many steps (0 = off).
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Adam with bias correction and optional per-parameter learning rates.
pub struct Adam<E> {
    cfg: AdamConfig,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    lr_override: Vec<Option<f64>>,
    t: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<E>) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        let v = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Self {
            cfg,
            m,
            v,
            lr_override: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Give every parameter whose name satisfies `pred` its own learning rate
    /// (parameter groups; e.g. a smaller rate for the pretrained encoder).
    pub fn set_lr_where(&mut self, store: &ParamStore<E>, pred: impl Fn(&str) -> bool, lr: f64) {
        for id in store.ids() {
            if pred(store.name(id)) {
                self.lr_override[id.0] = Some(lr);
            }
        }
    }

    /// One update from the accumulated gradients; gradients are zeroed after.
    pub fn step(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(AutodiffError::UninitializedOptimizer);
        }
        self.t += 1;
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (self.t as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = E::from_f64(self.cfg.eps);

        for id in store.ids() {
            let lr = E::from_f64(self.lr_override[id.0].unwrap_or(self.cfg.lr) * warm);
            let g = store.grad(id).data().to_vec();
            let shape = store.value(id).shape().to_vec();
            let mut m = self.m[id.0].data().to_vec();
            let mut v = self.v[id.0].data().to_vec();
            let mut theta = store.value(id).data().to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            self.m[id.0] = Tensor::from_vec(shape.clone(), m)?;
            self.v[id.0] = Tensor::from_vec(shape.clone(), v)?;
            store.set_value(id, Tensor::from_vec(shape, theta)?)?;
        }
        store.zero_grads();
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<E: Element>(store: &mut ParamStore<E>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for id in store.ids() {
        for &g in store.grad(id).data() {
            let g = g.to_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for id in store.ids() {
            let scaled = store.grad(id).map(|g| g * scale);
            store.set_grad(id, scaled)?;
        }
    }
    Ok(norm)
}
