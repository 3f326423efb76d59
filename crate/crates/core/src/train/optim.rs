use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            clip_norm: 0.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn with_clip_norm(mut self, clip_norm: f64) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Update every parameter with its gradient at learning rate `lr`.
    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::State(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let gscale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64() * gscale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                let wf = w.as_f64();
                *w = T::from_f64(wf - lr * (update + self.weight_decay * wf));
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_frac` of the steps, then cosine
/// decay to zero.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warm = ((warmup_frac * total as f64).ceil() as usize).max(1);
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = Tensor::<f32>::vector(vec![1.0, -2.0]);
        let g = Tensor::<f32>::vector(vec![0.5, 0.5]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        opt.step(vec![&mut p], &[g], 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::<f64>::vector(vec![0.0, 0.0]);
        let g = Tensor::<f64>::vector(vec![3.0, -0.1]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.0);
        opt.step(vec![&mut p], &[g], 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-9);
        assert!((p.data()[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_first_moment() {
        let mut p = Tensor::<f64>::vector(vec![0.0]);
        let mut opt = AdamW::new(0.5, 0.999, 1e-12, 0.0).with_clip_norm(1.0);
        opt.step(vec![&mut p], &[Tensor::vector(vec![100.0])], 0.0).unwrap();
        assert!((opt.m[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let total = 100;
        assert!((lr_at(0, total, 1.0, 0.03) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(lr_at(2, total, 1.0, 0.03), 1.0);
        assert_eq!(lr_at(3, total, 1.0, 0.03), 1.0);
        assert!(lr_at(99, total, 1.0, 0.03) < 1e-3);
        for s in 3..99 {
            assert!(lr_at(s + 1, total, 1.0, 0.03) <= lr_at(s, total, 1.0, 0.03));
        }
    }
}
