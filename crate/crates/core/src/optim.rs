//! AMSGrad with bias correction, global-norm gradient clipping and the
//! step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const STABILITY: f64 = 1e-8;
pub const BASE_LR: f64 = 2e-4;
pub const MAX_GRAD_NORM: f64 = 3.0;

/// `base · decay^⌊epoch / every⌋`, with the power taken as one
/// multiplication per decay event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: BASE_LR,
            decay: 0.98,
            every: 2,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: u64) -> f64 {
        let k = epoch / self.every.max(1);
        let mut lr = self.base;
        for _ in 0..k {
            lr *= self.decay;
            if lr == 0.0 {
                break;
            }
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite())
            || !(self.decay > 0.0 && self.decay <= 1.0)
            || self.every == 0
        {
            return Err(Error::Config(format!(
                "invalid learning-rate schedule {self:?}"
            )));
        }
        Ok(())
    }
}

/// Default schedule: 2e-4 decayed by 0.98 every 2 epochs.
pub fn lr_at(epoch: u64) -> f64 {
    LrSchedule::default().at(epoch)
}

/// Global ℓ² norm over every gradient tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1 when already within bounds).
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "clip_grad_norm",
        });
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(scale)
}

/// Per-parameter moments, aligned with the traversal order of the
/// parameter tree they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Running elementwise maximum of `v`.
    pub v_max: Vec<Tensor>,
}

impl OptimState {
    pub fn new<P: ParamTree<Leaf = Tensor>>(params: &P) -> Self {
        let mut zeros = Vec::new();
        params.visit("", &mut |_, t| {
            zeros.push(Tensor::zeros(t.shape().to_vec()))
        });
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }
}

/// One bias-corrected AMSGrad update of every leaf of `params` with the
/// matching entry of `grads` (same traversal order).
///
/// Nothing is modified if any update would be non-finite.
pub fn amsgrad_step<P: ParamTree<Leaf = Tensor>>(
    state: &mut OptimState,
    params: &mut P,
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit("", &mut |_, t| shapes.push(t.shape().to_vec()));
    if shapes.len() != grads.len() || shapes.len() != state.m.len() {
        return Err(shape_err!(
            "amsgrad: {} parameters, {} gradients, {} moment slots",
            shapes.len(),
            grads.len(),
            state.m.len()
        ));
    }
    if let Some((i, _)) = shapes
        .iter()
        .enumerate()
        .find(|(i, s)| grads[*i].shape() != s.as_slice())
    {
        return Err(shape_err!(
            "amsgrad: gradient {i} has shape {:?}, expected {:?}",
            grads[i].shape(),
            shapes[i]
        ));
    }

    let t = state.step + 1;
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut v_max = state.v_max.clone();
    let mut updates = Vec::with_capacity(grads.len());
    for (k, g) in grads.iter().enumerate() {
        let (mk, vk, xk) = (m[k].data_mut(), v[k].data_mut(), v_max[k].data_mut());
        let mut upd = Vec::with_capacity(g.len());
        for (i, &gi) in g.data().iter().enumerate() {
            mk[i] = BETA1 * mk[i] + (1.0 - BETA1) * gi;
            vk[i] = BETA2 * vk[i] + (1.0 - BETA2) * gi * gi;
            xk[i] = xk[i].max(vk[i]);
            upd.push(lr * (mk[i] / c1) / ((xk[i] / c2).sqrt() + STABILITY));
        }
        if !upd.iter().all(|u| u.is_finite()) {
            return Err(Error::NonFinite { op: "amsgrad" });
        }
        updates.push(upd);
    }

    let mut k = 0;
    params.visit_mut("", &mut |_, p| {
        for (x, u) in p.data_mut().iter_mut().zip(&updates[k]) {
            *x -= u;
        }
        k += 1;
    });
    *state = OptimState {
        step: t,
        m,
        v,
        v_max,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Leaf;

    fn scalar_param(x: f64) -> Vec<Leaf<Tensor>> {
        vec![Leaf(Tensor::vector(vec![x]))]
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0), 2e-4);
        assert_eq!(lr_at(1), 2e-4);
        assert_eq!(lr_at(2), 2e-4 * 0.98);
        assert!((lr_at(4) - 1.9208e-4).abs() < 1e-18);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::vector(vec![6.0]), Tensor::vector(vec![0.0])];
        assert_eq!(clip_grad_norm(&mut g, 3.0).unwrap(), 0.5);
        assert_eq!(g[0].data(), &[3.0]);
        let mut g = vec![Tensor::vector(vec![0.6, 0.8])];
        assert_eq!(clip_grad_norm(&mut g, 3.0).unwrap(), 1.0);
        assert_eq!(g[0].data(), &[0.6, 0.8]);
        let mut g = vec![Tensor::vector(vec![f64::NAN])];
        assert!(matches!(
            clip_grad_norm(&mut g, 3.0),
            Err(Error::NonFinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut g: Vec<Tensor> = (1..4)
                .map(|n| Tensor::vector((0..n * 5).map(|_| scale * r.random_range(-1.0..1.0)).collect()))
                .collect();
            clip_grad_norm(&mut g, MAX_GRAD_NORM).unwrap();
            prop_assert!(global_norm(&g) <= MAX_GRAD_NORM + 1e-12);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0);
        let mut s = OptimState::new(&p);
        amsgrad_step(&mut s, &mut p, &[Tensor::vector(vec![1.0])], 2e-4).unwrap();
        // m̂ = 1, v̂ = 1: update = lr / (1 + 1e-8).
        let expect = 1.0 - 2e-4 / (1.0 + 1e-8);
        assert!((p[0].0.data()[0] - expect).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut p = scalar_param(0.3);
        let mut s = OptimState::new(&p);
        for _ in 0..50 {
            amsgrad_step(&mut s, &mut p, &[Tensor::vector(vec![0.0])], 1e-2).unwrap();
        }
        assert_eq!(p[0].0.data()[0], 0.3);
    }

    #[test]
    fn v_max_is_monotone_and_step_increases() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut p = vec![Leaf(Tensor::vector(vec![0.0; 4]))];
        let mut s = OptimState::new(&p);
        for i in 0..100 {
            let before = s.v_max[0].clone();
            let g = Tensor::vector((0..4).map(|_| r.random_range(-3.0..3.0)).collect());
            amsgrad_step(&mut s, &mut p, &[g], 1e-3).unwrap();
            assert_eq!(s.step, i + 1);
            assert!(s.v_max[0]
                .data()
                .iter()
                .zip(before.data())
                .all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn non_finite_update_leaves_state_untouched() {
        let mut p = scalar_param(1.0);
        let mut s = OptimState::new(&p);
        let err = amsgrad_step(&mut s, &mut p, &[Tensor::vector(vec![f64::INFINITY])], 1e-3);
        assert!(matches!(err, Err(Error::NonFinite { op: "amsgrad" })));
        assert_eq!(s.step, 0);
        assert_eq!(p[0].0.data()[0], 1.0);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = scalar_param(1.0);
        let mut s = OptimState::new(&p);
        assert!(amsgrad_step(&mut s, &mut p, &[], 1e-3).is_err());
        assert!(amsgrad_step(&mut s, &mut p, &[Tensor::vector(vec![1.0, 2.0])], 1e-3).is_err());
    }
}
