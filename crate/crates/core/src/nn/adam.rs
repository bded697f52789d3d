use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over one flat parameter vector, which may span
/// several networks.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f64> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// Optimizer sized for the concatenated parameters of `nets`.
    pub fn for_networks(config: AdamConfig, nets: &[&Network<T>]) -> Self {
        Self::new(config, nets.iter().map(|n| n.param_count()).sum())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. A non-finite gradient aborts the step
    /// before any state changes.
    pub fn step_slice(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        self.begin(grads)?;
        self.update(params, grads, 0);
        Ok(())
    }

    /// Updates the parameters of `nets`, in order, from their
    /// concatenated gradient.
    pub fn step(&mut self, nets: &mut [&mut Network<T>], grads: &[T]) -> Result<()> {
        let total: usize = nets.iter().map(|n| n.param_count()).sum();
        if total != grads.len() {
            return Err(Error::shape(total, grads.len()));
        }
        self.begin(grads)?;
        let mut at = 0;
        for net in nets.iter_mut() {
            net.visit_params_mut(&mut |block| {
                self.update(block, &grads[at..at + block.len()], at);
                at += block.len();
            });
        }
        Ok(())
    }

    fn begin(&mut self, grads: &[T]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), grads.len()));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerics(format!("non-finite gradient at parameter {k}")));
        }
        self.step += 1;
        Ok(())
    }

    fn update(&mut self, params: &mut [T], grads: &[T], offset: usize) {
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let t = self.step as i32;
        let correction1 = T::one() - T::of(c.beta1.powi(t));
        let correction2 = T::one() - T::of(c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / correction1;
            let vhat = *v / correction2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step_slice(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::<f64>::new(cfg, 3);
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        adam.step_slice(&mut p, &g).unwrap();
        for i in 0..3 {
            let expected = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15, "{} vs {expected}", p[i]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        assert!(matches!(
            adam.step_slice(&mut p, &[0.1, f64::NAN]),
            Err(Error::Numerics(_))
        ));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let scales = [1.0, 4.0, 0.25, 9.0];
        let loss = |p: &[f64]| p.iter().zip(&scales).map(|(x, s)| 0.5 * s * x * x).sum::<f64>();
        let mut adam = Adam::<f64>::new(
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            4,
        );
        let mut p = vec![1.0, -1.0, 2.0, 0.5];
        let mut history = vec![loss(&p)];
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().zip(&scales).map(|(x, s)| s * x).collect();
            adam.step_slice(&mut p, &g).unwrap();
            history.push(loss(&p));
        }
        // monotone after a short warm-up
        for w in history[10..].windows(2).take(150) {
            assert!(w[1] <= w[0], "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(history[500] < 1e-2 * history[0]);
    }
}
