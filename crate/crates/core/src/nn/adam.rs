use ndarray::{Array2, Zip};

use super::{Param, Parameterized};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Moment buffers are created on the first update and
/// matched to parameters by visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// `(first, second)` moment per tensor, in parameter visiting order.
    pub moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn update(&mut self, model: &mut dyn Parameterized) -> Result<()> {
        let mut bad = None;
        model.visit_params(&mut |name, p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("gradient of {name} is not finite")));
        }

        if self.moments.is_empty() {
            model.visit_params(&mut |_, p| {
                self.moments
                    .push((Array2::zeros(p.value.raw_dim()), Array2::zeros(p.value.raw_dim())))
            });
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);

        let mut index = 0;
        let mut shape_error = None;
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |name, p: &mut Param| {
            let Some((m, v)) = moments.get_mut(index) else {
                shape_error.get_or_insert_with(|| format!("no optimizer moments for {name}"));
                return;
            };
            index += 1;
            if m.dim() != p.value.dim() {
                shape_error.get_or_insert_with(|| format!("moment shape mismatch for {name}"));
                return;
            }
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|theta, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
        if index != self.moments.len() && shape_error.is_none() {
            shape_error = Some(format!(
                "optimizer holds {} moment tensors, model has {index}",
                self.moments.len()
            ));
        }
        match shape_error {
            Some(msg) => Err(Error::State(msg)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Two {
        a: Param,
        b: Param,
    }

    impl Parameterized for Two {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    fn two(a: f64, ga: f64, b: f64, gb: f64) -> Two {
        let mut t = Two {
            a: Param::new(array![[a]]),
            b: Param::new(array![[b]]),
        };
        t.a.grad[[0, 0]] = ga;
        t.b.grad[[0, 0]] = gb;
        t
    }

    #[test]
    fn first_step_matches_scalar_closed_form() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let g: f64 = 0.37;
        let mut model = two(1.5, g, 0.0, 0.0);
        let mut opt = Adam::new(cfg);
        opt.update(&mut model).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction.
        let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expected = 1.5 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((model.a.value[[0, 0]] - expected).abs() < 1e-15);
        assert!((model.a.value[[0, 0]] - (1.5 - 0.01 * g / (g + 1e-8))).abs() < 1e-12);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut model = two(0.25, 0.0, -3.0, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut model).unwrap();
        assert_eq!(model.a.value[[0, 0]], 0.25);
        assert_eq!(model.b.value[[0, 0]], -3.0);
    }

    #[test]
    fn parameters_update_independently() {
        let mut joint = two(1.0, 0.5, 2.0, -4.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut joint).unwrap();

        let mut only_a = two(1.0, 0.5, 2.0, 0.0);
        Adam::new(AdamConfig::default()).update(&mut only_a).unwrap();
        let mut only_b = two(1.0, 0.0, 2.0, -4.0);
        Adam::new(AdamConfig::default()).update(&mut only_b).unwrap();

        assert_eq!(joint.a.value, only_a.a.value);
        assert_eq!(joint.b.value, only_b.b.value);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut model = two(1.0, f64::NAN, 0.0, 0.0);
        let err = Adam::new(AdamConfig::default()).update(&mut model).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(model.a.value[[0, 0]], 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
