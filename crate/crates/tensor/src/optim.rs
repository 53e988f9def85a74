//! RMSprop, in the form
//!
//! ```text
//! acc   <- alpha * acc + (1 - alpha) * grad^2
//! param <- param - lr * grad / (sqrt(acc) + eps)
//! ```

use crate::error::{Result, TensorError};
use crate::param::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState<T> {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
    /// One accumulator per trainable parameter, in store order.
    pub accumulators: Vec<Tensor<T>>,
}

/// Single tensor update. `acc` must be shape-matched with `param` and `grad`.
pub fn rmsprop_update<T: Scalar>(param: &mut [T], grad: &[T], acc: &mut [T], lr: f64, alpha: f64, eps: f64) {
    let (lr, alpha, eps) = (T::of(lr), T::of(alpha), T::of(eps));
    let one_m = T::one() - alpha;
    for ((p, g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
        *a = alpha * *a + one_m * *g * *g;
        *p -= lr * *g / (a.sqrt() + eps);
    }
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_hyper(learning_rate, DEFAULT_ALPHA, DEFAULT_EPS)
    }

    pub fn with_hyper(learning_rate: f64, alpha: f64, eps: f64) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(TensorError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TensorError::Config(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("eps must be positive, got {eps}")));
        }
        Ok(RmsPropState {
            learning_rate,
            alpha,
            eps,
            accumulators: Vec::new(),
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(TensorError::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(())
    }

    /// Applies one update from the gradients stored on every trainable
    /// parameter. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let trainable: Vec<_> = store.trainable().collect();
        for id in &trainable {
            let t = store.get(*id);
            if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TensorError::Diverged(store.name(*id).to_string()));
            }
        }
        if self.accumulators.is_empty() {
            self.accumulators = trainable
                .iter()
                .map(|id| Tensor::zeros(store.get(*id).shape().to_vec()))
                .collect();
        }
        if self.accumulators.len() != trainable.len() {
            return Err(TensorError::Config(format!(
                "optimizer tracks {} parameters but the model has {}",
                self.accumulators.len(),
                trainable.len()
            )));
        }
        for (acc, id) in self.accumulators.iter_mut().zip(&trainable) {
            let t = store.get_mut(*id);
            if acc.shape() != t.shape() {
                return Err(TensorError::Config(format!(
                    "accumulator shape {:?} does not match parameter shape {:?}",
                    acc.shape(),
                    t.shape()
                )));
            }
            let (data, grad) = t.data_and_grad_mut();
            if let Some(grad) = grad {
                rmsprop_update(data, grad, acc.data_mut(), self.learning_rate, self.alpha, self.eps);
            }
        }
        Ok(())
    }
}

/// Names of the trainable parameters in accumulator order.
pub fn accumulator_names<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store
        .entries()
        .iter()
        .filter(|e| e.kind == ParamKind::Trainable)
        .map(|e| e.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add_param("p", Tensor::scalar(value));
        s.get_mut(id).accumulate_grad(&[grad]);
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_accumulator() {
        let mut s = one_param(2.0, 0.0);
        let mut opt = RmsPropState::with_hyper(0.1, 0.9, 1e-8).unwrap();
        opt.accumulators = vec![Tensor::scalar(4.0)];
        opt.step(&mut s).unwrap();
        assert_eq!(s.entries()[0].tensor.data(), &[2.0]);
        assert_eq!(opt.accumulators[0].data(), &[0.9 * 4.0]);
    }

    #[test]
    fn hand_scalar_step() {
        let mut s = one_param(1.0, 1.0);
        let mut opt = RmsPropState::with_hyper(0.1, 0.99, 1e-8).unwrap();
        opt.step(&mut s).unwrap();
        let acc = opt.accumulators[0].data()[0];
        assert!((acc - 0.01).abs() < 1e-15);
        let p = s.entries()[0].tensor.data()[0];
        // 1 - 0.1 / (0.1 + 1e-8)
        assert!((p - 1e-7).abs() < 1e-9, "{p}");
    }

    #[test]
    fn first_step_is_scale_invariant() {
        let update = |g: f64| {
            let mut s = one_param(0.0, g);
            let mut opt = RmsPropState::with_hyper(0.01, 0.99, 1e-8).unwrap();
            opt.step(&mut s).unwrap();
            -s.entries()[0].tensor.data()[0]
        };
        let (small, large) = (update(1e-3), update(1e3));
        assert!((small - large).abs() / large < 1e-3);
        // fresh state: acc = (1-alpha) g^2, so the step is lr / sqrt(1-alpha)
        assert!((large - 0.01 / 0.01f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_the_parameter_and_changes_nothing() {
        let mut s = one_param(1.0, f64::NAN);
        let mut opt = RmsPropState::new(0.1).unwrap();
        let err = opt.step(&mut s).unwrap_err();
        assert_eq!(err, TensorError::Diverged("p".into()));
        assert_eq!(s.entries()[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn invalid_hyper_parameters() {
        assert!(RmsPropState::<f32>::new(0.0).is_err());
        assert!(RmsPropState::<f32>::with_hyper(0.1, 1.0, 1e-8).is_err());
        assert!(RmsPropState::<f32>::with_hyper(0.1, 0.9, 0.0).is_err());
    }
}
