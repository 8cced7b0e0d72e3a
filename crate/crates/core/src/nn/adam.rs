use ndarray::ArrayD;

use super::param::{Param, ParamArena};

/// Adam with bias correction. Learning rate is supplied per parameter so the
/// four model parts can train at different rates from one optimizer.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(arena: &ParamArena) -> Self {
        let m = arena.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        let v = arena.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// Apply one update from the accumulated gradients. Frozen parameters are
    /// skipped entirely (value, moments and step statistics untouched).
    pub fn step<F>(&mut self, arena: &mut ParamArena, lr_for: F)
    where
        F: Fn(&Param) -> f64,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, p) in arena.iter_mut() {
            if p.frozen {
                continue;
            }
            let lr = lr_for(p);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
            let lr_t = (lr * bc2.sqrt() / bc1) as f32;
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, mi, vi| {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    *w -= lr_t * *mi / (vi.sqrt() + eps);
                });
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
