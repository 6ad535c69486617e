use ndarray::{Array2, Zip};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::checkpoint::AdamMoments;

/// Adam with decoupled weight decay.
///
/// Parameters and moments are rounded to `f32` after every step so a
/// checkpoint captures the optimiser state exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: AdamMoments,
    steps: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self::resume(AdamMoments::zeros(store), 0, weight_decay)
    }

    pub fn resume(moments: AdamMoments, steps: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            moments,
            steps,
        }
    }

    pub fn moments(&self) -> &AdamMoments {
        &self.moments
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update with learning rate `lr`; `grads` follow store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.moments.m.len() != store.len() {
            return Err(Error::shape(
                "optimizer gradients",
                store.len(),
                grads.len(),
            ));
        }
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if p.dim() != grads[i].dim() {
                return Err(Error::shape("optimizer gradient", p.dim(), grads[i].dim()));
            }
            let (eps, wd) = (self.eps, self.weight_decay);
            Zip::from(p)
                .and(&mut self.moments.m[i])
                .and(&mut self.moments.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = round(b1 * *m + (1.0 - b1) * g);
                    *v = round(b2 * *v + (1.0 - b2) * g * g);
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p = round(*p - lr * (update + wd * *p));
                });
        }
        Ok(())
    }
}

fn round(x: f64) -> f64 {
    x as f32 as f64
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
