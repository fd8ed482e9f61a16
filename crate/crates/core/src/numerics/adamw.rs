use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Restores a saved state; moments must be ordered like the parameters
    /// passed to [`AdamW::step`].
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter slice with its gradient.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: vec![p.len(), self.m[i].len()],
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        });
        let mut p = [theta];
        opt.step(&mut [&mut p[..]], &[&[g][..]]).unwrap();
        assert_eq!(opt.steps(), 1);
        p[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+eps).
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((one_step(1.0, 2.0, 0.1, 0.0) - want).abs() < 1e-15);
        assert!((one_step(1.0, 2.0, 0.1, 0.0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_without_decay() {
        assert_eq!(one_step(1.5, 0.0, 0.1, 0.0), 1.5);
    }

    #[test]
    fn decay_is_decoupled() {
        let got = one_step(2.0, 0.0, 0.1, 0.01);
        assert_eq!(got, 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut p = [0.0f32; 3];
        assert!(opt.step(&mut [&mut p[..]], &[&[1.0f32, 2.0][..]]).is_err());
        assert!(opt.step(&mut [&mut p[..]], &[]).is_err());
    }
}
