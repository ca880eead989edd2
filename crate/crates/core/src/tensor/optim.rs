//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    shape: Vec<usize>,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: one pair of moment buffers per named parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Every parameter must carry a
    /// gradient; gradients are zeroed afterwards.
    ///
    /// Per element: `p -= lr*wd*p`, then the bias-corrected Adam step
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<'a, I>(&mut self, params: I, lr: f32) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if p.grad().is_none() {
                return Err(TensorError::Contract(format!("parameter {name} has no gradient")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params {
            let state = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                shape: p.shape().to_vec(),
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            if state.shape != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: state.shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
            let grad = p.grad().map(|g| g.to_vec()).unwrap_or_default();
            let Moments { m, v, .. } = state;
            p.update(|w| {
                for i in 0..w.len() {
                    let g = grad[i];
                    w[i] -= lr * weight_decay * w[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            })?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor {
        let mut p = Tensor::scalar(v).unwrap().with_requires_grad();
        p.accumulate_grad(&[g]).unwrap();
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = param(1.5, 0.0);
        opt.step([("p", &mut p)], 0.1).unwrap();
        assert_eq!(p.item().unwrap(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at t=1, so the step is lr * g/(|g|+eps).
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = param(1.0, 1.0);
        opt.step([("p", &mut p)], 0.1).unwrap();
        assert!((p.item().unwrap() - 0.9).abs() < 1e-6);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = param(2.0, 0.0);
        opt.step([("p", &mut p)], 0.1).unwrap();
        assert!((p.item().unwrap() - 2.0 * (1.0 - 0.005)).abs() < 1e-7);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::scalar(1.0).unwrap();
        assert!(matches!(opt.step([("p", &mut p)], 0.1), Err(TensorError::Contract(_))));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn step_counter_increases() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = param(1.0, 0.5);
        for expected in 1..=3 {
            p.accumulate_grad(&[0.5]).unwrap();
            opt.step([("p", &mut p)], 0.01).unwrap();
            assert_eq!(opt.steps_taken(), expected);
        }
    }
}
