use super::model::{Gradients, ModelCheckpoint};
use super::tensors::TensorSet;

/// Stochastic gradient descent with Nesterov momentum and global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    /// Gradients with a larger global L2 norm are rescaled to this norm.
    pub clip_norm: Option<f64>,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self { momentum, clip_norm, velocity: None }
    }

    pub fn velocity(&self) -> Option<(&TensorSet, &TensorSet)> {
        self.velocity.as_ref().map(|v| (&v.body, &v.head))
    }

    pub fn set_velocity(&mut self, body: TensorSet, head: TensorSet) {
        self.velocity = Some(Gradients { body, head });
    }

    /// Applies one update and returns the gradient norm before clipping.
    ///
    /// `v = mu v + g`, then `p -= lr (g + mu v)`.
    pub fn step(&mut self, ckpt: &mut ModelCheckpoint, grads: &Gradients, lr: f64) -> f64 {
        let norm = grads.norm();
        let mut g = grads.clone();
        if let Some(max) = self.clip_norm {
            if norm > max {
                g.body.scale(max / norm);
                g.head.scale(max / norm);
            }
        }
        let mu = self.momentum;
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(ckpt));
        for (vel, grad, params) in [(&mut v.body, &g.body, &mut ckpt.body), (&mut v.head, &g.head, &mut ckpt.head)] {
            vel.scale(mu);
            vel.add_scaled(1.0, grad);
            params.add_scaled(-lr, grad);
            params.add_scaled(-lr * mu, vel);
        }
        norm
    }
}
