use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer with its per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn sgd(learning_rate: T) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: T) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: T) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon: T::from_f64_lossy(1e-8),
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params` in place. `grads[i]` must be present
    /// and shape-match `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if !(self.learning_rate > T::zero()) {
            return Err(TensorError::Param { op: "optimizer_step", detail: "learning rate must be positive".into() });
        }
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| TensorError::Contract(format!("missing gradient for parameter {i}")))?;
            if p.shape() != g.shape() {
                return Err(TensorError::shape("optimizer_step", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        if self.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.kind == OptimizerKind::Adam
            && self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(TensorError::Contract("optimizer moments no longer match the parameter shapes".into()));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.unwrap().data()) {
                        *pv = *pv - lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    let g = g.unwrap().data();
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
