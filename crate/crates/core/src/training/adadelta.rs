//! Adadelta: decayed averages of squared gradients and squared updates,
//! with no global learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::student::StudentParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6 }
    }
}

impl AdadeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::contract(format!("adadelta rho {} outside [0, 1)", self.rho)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::contract("adadelta eps must be positive"));
        }
        Ok(())
    }
}

/// Per-parameter accumulators `E[g²]` and `E[Δx²]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    config: AdadeltaConfig,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(config: AdadeltaConfig, params: &StudentParams) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            config,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        })
    }

    pub fn config(&self) -> AdadeltaConfig {
        self.config
    }

    pub fn sq_grad(&self, index: usize) -> &[f64] {
        &self.sq_grad[index]
    }

    pub fn sq_delta(&self, index: usize) -> &[f64] {
        &self.sq_delta[index]
    }

    /// Apply one update. Parameters in frozen groups, and parameters with no
    /// gradient, are left untouched along with their accumulators.
    pub fn step(&mut self, params: &mut StudentParams, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.sq_grad.len() || params.params().len() != grads.len() {
            return Err(Error::Shape {
                op: "adadelta",
                left: vec![self.sq_grad.len()],
                right: vec![grads.len()],
            });
        }
        let AdadeltaConfig { rho, eps } = self.config;
        for (i, grad) in grads.iter().enumerate() {
            if !params.is_trainable(i) {
                continue;
            }
            let Some(grad) = grad else { continue };
            let param = &mut params.params_mut()[i].value;
            if grad.shape() != param.shape() {
                return Err(Error::Shape {
                    op: "adadelta",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            let eg = &mut self.sq_grad[i];
            let ed = &mut self.sq_delta[i];
            for (((x, &g), a), d) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(eg.iter_mut())
                .zip(ed.iter_mut())
            {
                *a = rho * *a + (1.0 - rho) * g * g;
                let delta = -((*d + eps).sqrt() / (*a + eps).sqrt()) * g;
                *d = rho * *d + (1.0 - rho) * delta * delta;
                *x += delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::{ParamGroup, StudentConfig};

    fn params() -> StudentParams {
        StudentParams::init(
            StudentConfig {
                vocab_size: 6,
                embed_dim: 2,
                lstm_hidden: 2,
                num_classes: 2,
                teacher_hidden: 3,
                max_len: 4,
                dropout_rate: 0.0,
                recurrent_dropout_rate: 0.0,
            },
            0,
        )
        .unwrap()
    }

    fn grads_filled(p: &StudentParams, v: f64) -> Vec<Option<Tensor>> {
        p.params()
            .iter()
            .map(|q| Some(Tensor::filled(q.value.shape(), v)))
            .collect()
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdadeltaState::new(AdadeltaConfig::default(), &p).unwrap();
        let g = grads_filled(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        let expected = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((expected + 0.004471).abs() < 5e-6);
        for (a, b) in p.params().iter().zip(before.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_accumulators() {
        let mut p = params();
        let mut opt = AdadeltaState::new(AdadeltaConfig::default(), &p).unwrap();
        {
            let g = grads_filled(&p, 1.0);
            opt.step(&mut p, &g).unwrap();
        }
        let after_one = p.clone();
        let acc = opt.sq_grad(0)[0];
        {
            let g = grads_filled(&p, 0.0);
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, after_one);
        assert!((opt.sq_grad(0)[0] - 0.95 * acc).abs() < 1e-18);
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut p = params();
        p.set_frozen(ParamGroup::Embeddings, true);
        let emb = p.get("embedding").unwrap().clone();
        let mut opt = AdadeltaState::new(AdadeltaConfig::default(), &p).unwrap();
        for _ in 0..100 {
            {
                let g = grads_filled(&p, 0.3);
                opt.step(&mut p, &g).unwrap();
            }
        }
        assert_eq!(p.get("embedding").unwrap(), &emb);
        assert!(opt.sq_grad(0).iter().all(|&v| v == 0.0));
        assert_ne!(p.get("classifier.w").unwrap(), params().get("classifier.w").unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = params();
        let mut opt = AdadeltaState::new(AdadeltaConfig::default(), &p).unwrap();
        let mut g = grads_filled(&p, 1.0);
        g[3] = Some(Tensor::zeros(&[7]));
        assert!(opt.step(&mut p, &g).is_err());
        assert!(opt.step(&mut p, &g[..2]).is_err());
    }
}
