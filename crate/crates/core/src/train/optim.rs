//! Nesterov-accelerated Adam.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::ParamStore;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for every parameter tensor, plus the step counter and learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub config: NadamConfig,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments sized after `sizes`.
    pub fn new(sizes: &[usize], lr: f64, config: NadamConfig) -> Self {
        OptimizerState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            config,
            lr,
        }
    }

    /// State for the trainable tensors of `store`, in store order.
    pub fn for_store(store: &ParamStore<T>, lr: f64, config: NadamConfig) -> Self {
        let sizes: Vec<usize> = store.trainable_ids().map(|id| store.tensor(id).len()).collect();
        Self::new(&sizes, lr, config)
    }

    /// Update the trainable tensors of `store`. `grads` follows
    /// [`ParamStore::trainable_ids`]; `None` is a zero gradient.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        if ids.len() != grads.len() || ids.len() != self.m.len() {
            return Err(shape_err!(
                "{} trainable tensors, {} gradients, {} optimizer slots",
                ids.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (&id, g) in ids.iter().zip(grads) {
            if let Some(g) = g {
                check_grad(&store.entry(id).name, store.tensor(id), g)?;
            }
        }
        self.t += 1;
        for (slot, (&id, g)) in ids.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                self.update(slot, store.tensor_mut(id).data_mut(), g.data());
            } else {
                let zeros = vec![T::zero(); store.tensor(id).len()];
                self.update(slot, store.tensor_mut(id).data_mut(), &zeros);
            }
        }
        Ok(())
    }

    fn update(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        let NadamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let (b1, b2): (T, T) = (c(beta1), c(beta2));
        let one = T::one();
        let bc1: T = c(1.0 - beta1.powi(t));
        let bc2: T = c(1.0 - beta2.powi(t));
        let (lr, eps): (T, T) = (c(self.lr), c(eps));
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * (b1 * m_hat + (one - b1) * g / bc1) / (v_hat.sqrt() + eps);
        }
    }
}

fn check_grad<T: Scalar>(name: &str, param: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(shape_err!("gradient {} for parameter `{name}` of shape {}", grad.shape(), param.shape()));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite(format!("gradient of `{name}`; step aborted")));
    }
    Ok(())
}

/// One Nadam step over loose tensors. `state` must have been created for these shapes.
pub fn nadam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!("{} params, {} gradients, {} optimizer slots", params.len(), grads.len(), state.m.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        check_grad(&format!("#{i}"), p, g)?;
        if state.m[i].len() != p.len() {
            return Err(shape_err!("optimizer slot {i} holds {} values for {}", state.m[i].len(), p.shape()));
        }
    }
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p.data_mut(), g.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_vec(Shape::vector(3), vec![1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut st = OptimizerState::new(&[3], 1e-3, NadamConfig::default());
        nadam_step(&mut p, &[Tensor::zeros(Shape::vector(3))], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_step_matches_reference() {
        // Reference: hand-coded update with t = 1.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64, 1.0f64);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = 1.0 - lr * (b1 * m_hat + (1.0 - b1) * g / (1.0 - b1)) / (v_hat.sqrt() + eps);

        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = OptimizerState::new(&[1], lr, NadamConfig::default());
        nadam_step(&mut p, &[Tensor::scalar(g)], &mut st).unwrap();
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = OptimizerState::new(&[1], 1e-3, NadamConfig::default());
        let err = nadam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!((p[0].data()[0], st.t), (1.0, 0));
    }
}
