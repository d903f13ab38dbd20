//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-2,
        }
    }
}

/// Optimizer state: one first- and second-moment buffer per parameter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self::with_sizes(config, params.iter().map(Tensor::len))
    }

    /// State for parameters with the given element counts.
    pub fn with_sizes(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `theta -= lr*wd*theta`, then the bias-corrected Adam step.
    /// `params` may hold tensors or `&mut` references to them.
    pub fn step<T: Scalar, P: AsMut<Tensor<T>>>(&mut self, params: &mut [P], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim("adamw_step", &[params.len()], &[grads.len()]));
        }
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&self.m) {
            let p = p.as_mut();
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
            if m.len() != p.len() {
                return Err(Error::dim("adamw_step", &[m.len()], p.shape()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (j, (w, &gj)) in p.as_mut().data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let theta = w.as_f64() * decay - lr * m_hat / (v_hat.sqrt() + eps);
                *w = T::from_f64(theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = vec![Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamWState::new(cfg(0.1, 0.0), &params);
        st.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn pure_decay_scales_parameters() {
        let mut params = vec![Tensor::<f64>::new(&[2], vec![2.0, -4.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[2])];
        let mut st = AdamWState::new(cfg(0.1, 0.5), &params);
        st.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] - 1.9).abs() < 1e-12);
        assert!((params[0].data()[1] + 3.8).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 on the first step, so the move is
        // lr * g / (|g| + eps).
        let mut params = vec![Tensor::<f64>::full(&[4], 0.3)];
        let grads = vec![Tensor::full(&[4], 1.0)];
        let mut st = AdamWState::new(cfg(1e-3, 0.0), &params);
        st.step(&mut params, &grads).unwrap();
        let expected = 0.3 - 1e-3 * 1.0 / (1.0 + 1e-8);
        for &p in params[0].data() {
            assert!((p - expected).abs() < 1e-15);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamWState::new(cfg(0.1, 0.0), &params);
        assert!(matches!(st.step(&mut params, &grads), Err(Error::Dimension { .. })));
        assert_eq!(st.step_count(), 0);
    }
}
