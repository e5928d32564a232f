use crate::error::{invalid, Result, TensorError};
use crate::{Scalar, Tensor};

/// What happens to the learning rate once warm-up is over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Decay {
    /// `peak * sqrt(warmup / t)`.
    #[default]
    InverseSqrt,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay: Decay,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_steps: 4000,
            decay: Decay::InverseSqrt,
        }
    }
}

impl Schedule {
    /// Learning rate for 1-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup_steps as f64;
        if t <= w {
            return self.peak_lr * t / w;
        }
        match self.decay {
            Decay::Constant => self.peak_lr,
            Decay::InverseSqrt => self.peak_lr * (w.max(1.0) / t).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    /// Global L2 norm clip applied to the gradients before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: Schedule::default(),
            clip_norm: None,
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr(self.t.max(1))
    }

    /// One bias-corrected Adam update. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return invalid(
                "adam_step",
                format!(
                    "{} params and {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            );
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x.as_f64() * x.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let lr = c.schedule.lr(self.t);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let step = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        let clip = T::from_f64_lossy(clip);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
