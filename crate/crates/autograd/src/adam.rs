use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, set has {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let t = self.step as i32;
        let bias1 = T::one() - T::lit(c.beta1.powi(t));
        let bias2 = T::one() - T::lit(c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.as_ref().expect("checked above").data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.add("w", Tensor::scalar(w)).unwrap();
        set
    }

    fn set_grad(set: &mut ParamSet<f64>, g: f64) {
        set.iter_mut().next().unwrap().grad = Some(Tensor::scalar(g));
    }

    fn value(set: &ParamSet<f64>) -> f64 {
        set.iter().next().unwrap().value.data()[0]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut set = scalar_set(1.25);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &set);
        for _ in 0..5 {
            set_grad(&mut set, 0.0);
            adam.step(&mut set).unwrap();
        }
        assert_eq!(value(&set), 1.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut set = scalar_set(0.0);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), &set);
            set_grad(&mut set, g);
            adam.step(&mut set).unwrap();
            assert!((value(&set) + 0.01 * f64::signum(g)).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w - 3)^2, reference recurrence written out independently.
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let mut set = scalar_set(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &set);
        for _ in 0..100 {
            let g = 2.0 * (value(&set) - 3.0);
            set_grad(&mut set, g);
            adam.step(&mut set).unwrap();
        }
        assert!((value(&set) - w).abs() < 1e-12);
        assert!((value(&set) - 3.0).abs() < 0.05, "{}", value(&set));
        assert_eq!(adam.steps_taken(), 100);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut set = scalar_set(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &set);
        assert!(matches!(adam.step(&mut set), Err(Error::State(_))));
    }

    #[test]
    fn zero_lr_is_exact_noop() {
        let mut set = scalar_set(0.123456789);
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &set);
        set_grad(&mut set, 5.0);
        adam.step(&mut set).unwrap();
        assert_eq!(value(&set), 0.123456789);
    }
}
