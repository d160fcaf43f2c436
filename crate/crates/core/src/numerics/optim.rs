use serde::{Deserialize, Serialize};

use super::{ModelParams, NumericsError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// v ← momentum·v + grad + weight_decay·param
/// param ← param − lr·v
/// ```
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut ModelParams<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<(), NumericsError> {
    sgd_momentum_step_grouped(params, grads, velocity, lr, lr, momentum, weight_decay)
}

/// Same update as [`sgd_momentum_step`], but the transfer tensor moves with
/// its own learning rate `transfer_lr`.
pub fn sgd_momentum_step_grouped<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut ModelParams<T>,
    lr: T,
    transfer_lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<(), NumericsError> {
    if !(lr > T::zero()) || !(transfer_lr > T::zero()) {
        return Err(NumericsError::Optimizer(format!("lr must be positive, got {lr} / {transfer_lr}")));
    }
    if !(momentum >= T::zero() && momentum < T::one()) {
        return Err(NumericsError::Optimizer(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if !(weight_decay >= T::zero()) {
        return Err(NumericsError::Optimizer(format!("weight decay must be >= 0, got {weight_decay}")));
    }
    if !params.same_shape(grads) || !params.same_shape(velocity) {
        return Err(NumericsError::Shape("params, grads and velocity differ in shape".into()));
    }
    let mut next = params.clone();
    let mut next_v = velocity.clone();
    let groups = next.slices_mut().len();
    for (k, ((p, g), v)) in next.slices_mut().into_iter().zip(grads.slices()).zip(next_v.slices_mut()).enumerate() {
        // the transfer tensor is always the last slice
        let lr = if k + 1 == groups { transfer_lr } else { lr };
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    if !next.all_finite() || !next_v.all_finite() {
        return Err(NumericsError::NonFinite { op: "sgd_momentum_step".into() });
    }
    *params = next;
    *velocity = next_v;
    Ok(())
}

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr<T: Scalar>(step: usize, total_steps: usize, base_lr: T) -> Result<T, NumericsError> {
    if total_steps == 0 || step > total_steps {
        return Err(NumericsError::StepOutOfRange { step, total: total_steps });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * T::of(0.5 * (1.0 + (std::f64::consts::PI * progress).cos())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ModelShape;
    use approx::assert_abs_diff_eq;

    fn tiny() -> ModelParams<f64> {
        let shape = ModelShape { input_dim: 1, hidden_dims: vec![1], num_categories: 2, num_levels: 2 };
        let mut p = ModelParams::zeros(&shape).unwrap();
        p.fill(0.5);
        p
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.fill(2.0);
        let mut v = p.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        for s in p.slices() {
            assert!(s.iter().all(|&x| (x - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut v = p.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.fill(1.0);
        let mut v = p.zeros_like();
        let start = p.category_head.bias[0];
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        let first = p.category_head.bias[0];
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        let second = p.category_head.bias[0];
        assert_abs_diff_eq!(first - start, -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(second - first, -0.19, epsilon = 1e-15);
    }

    #[test]
    fn grouped_step_scales_only_the_transfer_tensor() {
        let mut plain = tiny();
        let mut grouped = tiny();
        let mut g = plain.zeros_like();
        g.fill(1.0);
        let (mut v1, mut v2) = (plain.zeros_like(), plain.zeros_like());
        sgd_momentum_step(&mut plain, &g, &mut v1, 0.1, 0.9, 1e-4).unwrap();
        sgd_momentum_step_grouped(&mut grouped, &g, &mut v2, 0.1, 0.3, 0.9, 1e-4).unwrap();
        assert_eq!(plain.extractor, grouped.extractor);
        assert_eq!(plain.category_head, grouped.category_head);
        assert_abs_diff_eq!(0.5 - grouped.transfer.get(0, 0), 3.0 * (0.5 - plain.transfer.get(0, 0)), epsilon = 1e-15);
        assert_eq!(v1, v2);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut p = tiny();
        let g = p.zeros_like();
        let mut v = p.zeros_like();
        assert!(sgd_momentum_step(&mut p, &g, &mut v, 0.0, 0.9, 0.0).is_err());
        assert!(sgd_momentum_step(&mut p, &g, &mut v, 0.1, 1.0, 0.0).is_err());
        assert!(sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.5, -1.0).is_err());
        let mut bad = g.clone();
        bad.fill(f64::NAN);
        assert_eq!(
            sgd_momentum_step(&mut p, &bad, &mut v, 0.1, 0.5, 0.0),
            Err(NumericsError::NonFinite { op: "sgd_momentum_step".into() })
        );
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
        assert_abs_diff_eq!(cosine_lr(100, 100, 0.01).unwrap(), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(50, 100, 0.01).unwrap(), 0.005, epsilon = 1e-15);
        for total in [1usize, 7, 100, 5000] {
            for s in 0..total {
                assert!(cosine_lr(s + 1, total, 1.0f64).unwrap() <= cosine_lr(s, total, 1.0).unwrap());
            }
        }
        assert!(cosine_lr(101, 100, 0.01).is_err());
        assert!(cosine_lr(0, 0, 0.01).is_err());
    }
}
