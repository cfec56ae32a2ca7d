//! AdamW with decoupled weight decay, gradient clipping, and the
//! warmup-plus-cosine learning-rate schedule.

use ndarray::ArrayD;

use crate::error::{CodecError, Result};
use crate::scalar::Scalar;

/// First/second moment accumulators plus a step counter.
pub struct OptimizerState<F: Scalar> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &[ArrayD<F>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }
}

pub struct AdamW<F: Scalar> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(beta1: F, beta2: F, weight_decay: F) -> Self {
        AdamW { beta1, beta2, eps: F::from_f64_c(1e-8), weight_decay }
    }

    /// One update. Weight decay is applied directly to the parameters
    /// (never through the moments) and only where `decay[i]` is set.
    /// A missing gradient is treated as zero.
    pub fn step(
        &self,
        params: &mut [ArrayD<F>],
        grads: &[Option<ArrayD<F>>],
        decay: &[bool],
        state: &mut OptimizerState<F>,
        lr: F,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(CodecError::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "params {}, grads {}, state {}",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            });
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);

        for (idx, p) in params.iter_mut().enumerate() {
            let zero;
            let g = match &grads[idx] {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(CodecError::ShapeMismatch {
                            op: "adamw_step",
                            detail: format!(
                                "param {:?} vs grad {:?} at index {idx}",
                                p.shape(),
                                g.shape()
                            ),
                        });
                    }
                    g
                }
                None => {
                    zero = ArrayD::zeros(p.raw_dim());
                    &zero
                }
            };
            if decay[idx] && self.weight_decay > F::zero() {
                let factor = F::one() - lr * self.weight_decay;
                p.mapv_inplace(|x| x * factor);
            }
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (F::one() - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (F::one() - self.beta2) * gi * gi;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Scales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<ArrayD<F>>], max_norm: F) -> F {
    let mut sq = F::zero();
    for g in grads.iter().flatten() {
        for &x in g.iter() {
            sq = sq + x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > F::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Linear warmup to `lr_max`, cosine decay to `lr_min`, clamped beyond.
pub fn lr_schedule(step: u64, warmup_steps: u64, max_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    assert!(warmup_steps < max_steps, "lr_schedule: warmup must precede max_steps");
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    if step >= max_steps {
        return lr_min;
    }
    let progress = (step - warmup_steps) as f64 / (max_steps - warmup_steps) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn one(x: f32) -> Vec<ArrayD<f32>> {
        vec![ArrayD::from_elem(IxDyn(&[1]), x)]
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = one(2.0);
        let grads = vec![Some(ArrayD::zeros(IxDyn(&[1])))];
        let mut st = OptimizerState::new(&p);
        let opt = AdamW::new(0.9, 0.95, 0.1);
        let lr = 0.5f32;
        opt.step(&mut p, &grads, &[true], &mut st, lr).unwrap();
        // p * (1 - lr*wd); the Adam term is exactly zero for a zero gradient
        assert!((p[0][[0]] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_updates_moments_only() {
        let mut p = one(1.5);
        let grads = vec![Some(ArrayD::from_elem(IxDyn(&[1]), 3.0f32))];
        let mut st = OptimizerState::new(&p);
        let opt = AdamW::new(0.9, 0.95, 0.1);
        opt.step(&mut p, &grads, &[true], &mut st, 0.0).unwrap();
        assert_eq!(p[0][[0]], 1.5);
        assert!(st.m[0][[0]] > 0.0 && st.v[0][[0]] > 0.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_bias_corrected_update() {
        // g=1, p=0, betas=(0.9,0.95), lr=0.1, wd=0: mhat=1, vhat=1 -> p = -0.1
        let mut p = one(0.0);
        let grads = vec![Some(ArrayD::from_elem(IxDyn(&[1]), 1.0f32))];
        let mut st = OptimizerState::new(&p);
        let opt = AdamW::new(0.9, 0.95, 0.0);
        opt.step(&mut p, &grads, &[true], &mut st, 0.1).unwrap();
        assert!((p[0][[0]] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adamw_identity_when_lr_and_wd_zero() {
        let mut p = one(0.7);
        let grads = vec![Some(ArrayD::from_elem(IxDyn(&[1]), -2.0f32))];
        let mut st = OptimizerState::new(&p);
        let opt = AdamW::new(0.9, 0.95, 0.0);
        opt.step(&mut p, &grads, &[true], &mut st, 0.0).unwrap();
        assert_eq!(p[0][[0]], 0.7);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = one(0.0);
        let grads = vec![Some(ArrayD::zeros(IxDyn(&[2])))];
        let mut st = OptimizerState::new(&p);
        let opt = AdamW::<f32>::new(0.9, 0.95, 0.0);
        assert!(opt.step(&mut p, &grads, &[true], &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 2000, 600_000, 6e-4, 6e-5), 0.0);
        assert!((lr_schedule(2000, 2000, 600_000, 6e-4, 6e-5) - 6e-4).abs() < 1e-12);
        assert!((lr_schedule(600_000, 2000, 600_000, 6e-4, 6e-5) - 6e-5).abs() < 1e-12);
        assert!((lr_schedule(700_000, 2000, 600_000, 6e-4, 6e-5) - 6e-5).abs() < 1e-12);
        // midpoint of the cosine is the average of max and min
        let mid = lr_schedule(301_000, 2000, 600_000, 6e-4, 6e-5);
        assert!((mid - 0.5 * (6e-4 + 6e-5)).abs() < 1e-8);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![
            Some(ArrayD::from_elem(IxDyn(&[2]), 3.0f32)),
            Some(ArrayD::from_elem(IxDyn(&[1]), 4.0f32)),
        ];
        // norm = sqrt(9+9+16) = sqrt(34)
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 34.0f32.sqrt()).abs() < 1e-5);
        let mut sq = 0.0f32;
        for g in grads.iter().flatten() {
            sq += g.iter().map(|x| x * x).sum::<f32>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-5);
    }
}
