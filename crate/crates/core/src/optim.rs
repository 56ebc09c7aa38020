//! Adam optimizer with serializable state.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::models::ModelGraph;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Reference CycleGAN settings.
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<ArrayD<F>>,
    pub second_moment: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, model: &ModelGraph<F>) -> Self {
        Adam {
            config,
            step: 0,
            first_moment: model
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
            second_moment: model
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    /// One update with an optional learning-rate scale (for schedules).
    pub fn apply(&mut self, model: &mut ModelGraph<F>, grads: &[ArrayD<F>], lr_scale: f64) {
        assert_eq!(grads.len(), model.params.len());
        self.step += 1;
        let lr = F::from_f64(self.config.learning_rate * lr_scale);
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.eps);
        let one = F::one();
        let bias1 = one - b1.powi(self.step as i32);
        let bias2 = one - b2.powi(self.step as i32);
        for ((param, g), (m, v)) in model
            .params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            ndarray::Zip::from(&mut param.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_discriminator, DiscriminatorSpec};

    #[test]
    fn adam_minimizes_a_quadratic() {
        // Drive one scalar "parameter set" toward a target through the
        // optimizer's own update rule.
        let spec = DiscriminatorSpec {
            base_channels: 1,
            ..Default::default()
        };
        let mut model = build_discriminator::<f64>(&spec, 0).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &model,
        );
        let target = 0.5;
        for _ in 0..200 {
            let grads: Vec<_> = model
                .params
                .iter()
                .map(|p| p.value.mapv(|v| 2.0 * (v - target)))
                .collect();
            adam.apply(&mut model, &grads, 1.0);
        }
        for p in &model.params {
            assert!(
                p.value.iter().all(|&v| (v - target).abs() < 1e-3),
                "param {} failed to converge",
                p.name
            );
        }
    }
}
