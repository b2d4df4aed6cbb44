use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet};
use crate::linalg::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor, in the
/// traversal order of the [`ParamSet`] being optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &impl ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![T::ZERO; t.len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update. Rejects the whole step, leaving parameters and state
    /// untouched, if any gradient entry is non-finite.
    pub fn step(
        &mut self,
        params: &mut impl ParamSet<T>,
        grads: &impl ParamSet<T>,
    ) -> Result<(), NnError> {
        let grads = grads.tensors();
        if grads.len() != self.m.len() {
            return Err(NnError::Shape(format!(
                "{} gradient tensors for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, g), m) in grads.iter().zip(&self.m) {
            if g.len() != m.len() {
                return Err(NnError::Shape(format!("gradient {name} has wrong length")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
        }
        let mut targets = params.tensors_mut();
        if targets.len() != grads.len() {
            return Err(NnError::Shape("parameter/gradient structure differs".into()));
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.eps);
        for (((p, (_, g)), m), v) in targets
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (T::ONE - b1) * gk;
                v[k] = b2 * v[k] + (T::ONE - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{init_mlp, Activation, DenseLayer, Mlp};

    fn scalar_net(w: f64) -> Mlp<f64> {
        Mlp::new(vec![DenseLayer::new(Matrix::from_vec(1, 1, vec![w]), vec![0.0], Activation::None)
            .unwrap()])
        .unwrap()
    }

    fn scalar_grad(net: &Mlp<f64>, g: f64) -> crate::nn::MlpGrads<f64> {
        let mut grads = net.zero_grads();
        grads.layers[0].weight[(0, 0)] = g;
        grads
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut net = scalar_net(0.0);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let g = scalar_grad(&net, 1.0);
        adam.step(&mut net, &g).unwrap();
        let w = net.layers()[0].weight[(0, 0)];
        assert!((w + 0.003).abs() < 1e-10, "{w}");
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut net = scalar_net(0.7);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let zero = net.zero_grads();
        for _ in 0..3 {
            adam.step(&mut net, &zero).unwrap();
        }
        assert_eq!(net.layers()[0].weight[(0, 0)], 0.7);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut net = init_mlp::<f32>(&[2, 2, 1], &[Activation::Relu, Activation::None], 0).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut g = net.zero_grads();
        g.layers[1].bias[0] = f32::NAN;
        assert_eq!(
            adam.step(&mut net, &g),
            Err(NnError::NonFiniteGradient("1.bias".into()))
        );
        assert_eq!(net, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn identical_runs_have_identical_trajectories() {
        let run = || {
            let mut net = init_mlp::<f32>(&[3, 2], &[Activation::None], 5).unwrap();
            let mut adam = AdamState::new(&net, AdamConfig::default());
            for k in 0..10 {
                let mut g = net.zero_grads();
                g.layers[0]
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, x)| *x = ((i + k) as f32).sin());
                adam.step(&mut net, &g).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
