use serde::{Deserialize, Serialize};

use crate::grad::{Matrix, Real};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Matrix<T>,
    pub second: Matrix<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(m: &Matrix<T>) -> Self {
        Self {
            first: Matrix::zeros(m.rows(), m.cols()),
            second: Matrix::zeros(m.rows(), m.cols()),
        }
    }
}

/// Returned when an update would leave a non-finite value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonFiniteUpdate;

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step index.
pub fn adam_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut Moments<T>,
    t: u64,
    config: &AdamConfig,
) -> Result<(), NonFiniteUpdate> {
    assert!(t >= 1, "Adam step index starts at 1");
    assert_eq!(param.shape(), grad.shape());
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let one = T::one();
    let correction1 = T::from_f64_lossy(1.0 - config.beta1.powf(t as f64));
    let correction2 = T::from_f64_lossy(1.0 - config.beta2.powf(t as f64));
    let lr = T::from_f64_lossy(config.lr);
    let eps = T::from_f64_lossy(config.eps);

    let mut updated = param.clone();
    let (m, v) = (state.first.data_mut(), state.second.data_mut());
    for (k, (p, &g)) in updated.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[k] = b1 * m[k] + (one - b1) * g;
        v[k] = b2 * v[k] + (one - b2) * g * g;
        let m_hat = m[k] / correction1;
        let v_hat = v[k] / correction2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    if !updated.is_finite() {
        return Err(NonFiniteUpdate);
    }
    *param = updated;
    Ok(())
}
