//! First-order optimizers and the warmup learning-rate schedule.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// `k · d^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`.
pub fn noam_lr(step: u64, d_att: usize, warmup: u64, k: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    k * (d_att as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Adam driven by the warmup schedule.
    AdamNoam {
        k: f64,
        warmup: u64,
    },
    /// Adam at a fixed learning rate.
    Adam {
        lr: f64,
    },
    Adadelta {
        lr: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaParams {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaParams {
    fn default() -> Self {
        AdadeltaParams { rho: 0.95, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub adam: AdamParams,
    pub adadelta: AdadeltaParams,
    /// Number of updates applied so far.
    pub step: u64,
    /// Adam first moments, or Adadelta's running mean of squared gradients.
    pub first: Vec<Tensor>,
    /// Adam second moments, or Adadelta's running mean of squared updates.
    pub second: Vec<Tensor>,
    /// Model width used by the warmup schedule.
    pub d_att: usize,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore, d_att: usize) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            kind,
            adam: AdamParams::default(),
            adadelta: AdadeltaParams::default(),
            step: 0,
            first: zeros.clone(),
            second: zeros,
            d_att,
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::AdamNoam { k, warmup } => noam_lr(self.step + 1, self.d_att, warmup, k),
            OptimizerKind::Adam { lr } | OptimizerKind::Adadelta { lr } => lr,
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(dim_err!(
                "{} gradients and {} buffers for {} parameters",
                grads.len(),
                self.first.len(),
                params.len()
            ));
        }
        let lr = self.next_lr();
        self.step += 1;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            if g.shape() != params.get(id).shape() || self.first[i].shape() != g.shape() {
                return Err(dim_err!("gradient shape {:?} for parameter {}", g.shape(), params.name(id)));
            }
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            match self.kind {
                OptimizerKind::AdamNoam { .. } | OptimizerKind::Adam { .. } => {
                    let AdamParams { beta1, beta2, eps } = self.adam;
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Adadelta { .. } => {
                    let AdadeltaParams { rho, eps } = self.adadelta;
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = rho * m[j] + (1.0 - rho) * gj * gj;
                        let dx = -((v[j] + eps).sqrt() / (m[j] + eps).sqrt()) * gj;
                        v[j] = rho * v[j] + (1.0 - rho) * dx * dx;
                        p[j] += lr * dx;
                    }
                }
            }
        }
        if !params.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::Numeric(format!("parameters became non-finite at step {}", self.step)));
        }
        Ok(lr)
    }
}

/// `sqrt(Σ g²)` over every gradient tensor.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![x]));
        s
    }

    #[test]
    fn noam_reference_values() {
        let expected = 6.987_712_429_686_843e-7;
        assert!((noam_lr(1, 256, 2000, 1.0) - expected).abs() < 1e-20);
        let peak = noam_lr(2000, 256, 2000, 1.0);
        assert!((peak - 256f64.powf(-0.5) * 2000f64.powf(-0.5)).abs() < 1e-18);
        let argmax = (1..=20_000).max_by(|&a, &b| noam_lr(a, 256, 2000, 1.0).total_cmp(&noam_lr(b, 256, 2000, 1.0)));
        assert_eq!(argmax, Some(2000));
        for s in 1..2000 {
            assert!(noam_lr(s + 1, 256, 2000, 1.0) >= noam_lr(s, 256, 2000, 1.0));
        }
        for s in 2000..6000 {
            assert!(noam_lr(s + 1, 256, 2000, 1.0) <= noam_lr(s, 256, 2000, 1.0));
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam { lr: 0.1 }, OptimizerKind::Adadelta { lr: 1.0 }] {
            let mut p = scalar_store(1.5);
            let mut opt = OptimizerState::new(kind, &p, 4);
            for _ in 0..3 {
                opt.update(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
            }
            assert_eq!(p.iter().next().unwrap().1.data(), &[1.5]);
        }
    }

    #[test]
    fn single_adam_step_by_hand() {
        let mut p = scalar_store(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam { lr: 0.1 }, &p, 4);
        opt.update(&mut p, &[Tensor::vector(vec![0.5])]).unwrap();
        let m_hat = (0.1 * 0.5) / (1.0 - 0.9);
        let v_hat = (0.02 * 0.25) / (1.0 - 0.98);
        let expected = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-9);
        assert!((p.iter().next().unwrap().1.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adadelta_descends_a_parabola() {
        let mut p = scalar_store(3.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adadelta { lr: 1.0 }, &p, 4);
        let mut prev = 9.0;
        for _ in 0..100 {
            let x = p.iter().next().unwrap().1.data()[0];
            opt.update(&mut p, &[Tensor::vector(vec![2.0 * x])]).unwrap();
            let x = p.iter().next().unwrap().1.data()[0];
            assert!(x * x < prev);
            prev = x * x;
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
    }
}
