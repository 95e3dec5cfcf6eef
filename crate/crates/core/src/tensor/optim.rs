//! Adam with decoupled weight decay.

use super::{Scalar, Tensor};
use crate::error::{cfg_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[Tensor<T>]) -> Result<Self> {
        if cfg.lr.is_nan() || cfg.lr <= 0.0 {
            return Err(cfg_err!("adam: lr must be positive, got {}", cfg.lr));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(cfg_err!("adam: betas must lie in [0, 1)"));
        }
        Ok(Self {
            cfg,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            steps: 0,
        })
    }

    /// Parameters with `None` gradients are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(dim_err!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if c.weight_decay != 0.0 {
                p.data_mut().iter_mut().for_each(|x| *x *= decay);
            }
            if g.shape() != p.shape() {
                return Err(dim_err!(
                    "adam: grad {:?} vs param {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x = *x - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.5, -2.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        let g = vec![Some(Tensor::zeros(&[2]))];
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn first_step_without_momentum_is_sign_sgd() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = Adam::new(cfg, &p).unwrap();
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(matches!(
            Adam::<f32>::new(cfg, &[]),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap()];
            let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
            for s in 0..10 {
                let g = p[0].map(|x| x * 2.0 + s as f32 * 0.01);
                opt.step(&mut p, &[Some(g)]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        let bits = |p: &[Tensor<f32>]| p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
