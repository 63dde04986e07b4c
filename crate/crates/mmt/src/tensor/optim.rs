//! Adam with warmup learning-rate schedule.

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Adam moment estimates for one set of trainable parameters.
/// `t` increases by exactly one per update.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }
}

/// Adam constants. Defaults follow the transformer training convention;
/// only the base rate and warmup are prescribed by the training recipe.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
        }
    }
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug)]
pub enum LrSchedule {
    /// lr(step) = base * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
    /// Rises linearly during warmup, peaks exactly at `warmup_steps`, then
    /// decays with the inverse square root of the step.
    Noam {
        base: f64,
        d_model: usize,
        warmup_steps: u64,
    },
    Fixed(f64),
}

impl LrSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        debug_assert!(step >= 1);
        match *self {
            LrSchedule::Noam {
                base,
                d_model,
                warmup_steps,
            } => {
                let s = step as f64;
                let w = warmup_steps as f64;
                base * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
            }
            LrSchedule::Fixed(lr) => lr,
        }
    }
}

/// One Adam update with bias correction at the given step (`step == state.t + 1`).
/// Aborts with a fault report when any gradient is non-finite.
pub fn adam_step(
    store: &mut ParamStore<f32>,
    trainable: &[ParamId],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    params: AdamParams,
    lr: f64,
) -> Result<()> {
    if trainable.len() != grads.len() || trainable.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            trainable.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in trainable.iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                store.name(*id)
            )));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2, eps) = (params.beta1 as f32, params.beta2 as f32, params.eps as f32);
    let bc1 = 1.0 - (params.beta1).powf(t) as f32;
    let bc2 = 1.0 - (params.beta2).powf(t) as f32;
    let lr = lr as f32;
    for ((id, g), (m, v)) in trainable
        .iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let value = store.value_mut(*id);
        if value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "adam_step: grad {:?} for parameter of shape {:?}",
                g.shape(),
                value.shape()
            )));
        }
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Bundles the trainable set, moments and schedule for a training run.
pub struct Optimizer {
    pub trainable: Vec<ParamId>,
    pub state: AdamState,
    pub params: AdamParams,
    pub schedule: LrSchedule,
}

impl Optimizer {
    pub fn new(store: &ParamStore<f32>, trainable: Vec<ParamId>, schedule: LrSchedule) -> Self {
        let shapes: Vec<Vec<usize>> = trainable
            .iter()
            .map(|id| store.value(*id).shape().to_vec())
            .collect();
        Optimizer {
            trainable,
            state: AdamState::new(&shapes),
            params: AdamParams::default(),
            schedule,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.state.t
    }

    /// Apply one update using gradients looked up from a backward pass.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &super::tape::Gradients<f32>,
    ) -> Result<()> {
        let gvec: Vec<Tensor<f32>> = self
            .trainable
            .iter()
            .map(|id| grads.param_or_zeros(*id, store.value(*id).shape()))
            .collect();
        let lr = self.schedule.rate(self.state.t + 1);
        adam_step(
            store,
            &self.trainable,
            &gvec,
            &mut self.state,
            self.params,
            lr,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected m_hat = g, v_hat = g^2, so the first update is
        // param - lr * g / (|g| + eps); with g = 1 that is param - lr.
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let mut state = AdamState::new(&[vec![]]);
        let lr = 0.125;
        adam_step(
            &mut store,
            &[id],
            &[Tensor::scalar(1.0)],
            &mut state,
            AdamParams::default(),
            lr,
        )
        .unwrap();
        let got = store.value(id).item().unwrap();
        assert!((got - (1.0 - lr as f32)).abs() < 1e-6, "got {got}");
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_grad_fresh_state_leaves_params_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::vector(vec![0.5, -0.25, 3.0e-7]));
        let before = store.value(id).clone();
        let mut state = AdamState::new(&[vec![3]]);
        adam_step(
            &mut store,
            &[id],
            &[Tensor::zeros(&[3])],
            &mut state,
            AdamParams::default(),
            0.1,
        )
        .unwrap();
        let after = store.value(id);
        for (b, a) in before.data().iter().zip(after.data()) {
            assert_eq!(b.to_bits(), a.to_bits());
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn non_finite_grad_aborts() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let mut state = AdamState::new(&[vec![]]);
        let err = adam_step(
            &mut store,
            &[id],
            &[Tensor::scalar(f32::NAN)],
            &mut state,
            AdamParams::default(),
            0.1,
        );
        assert!(matches!(err, Err(crate::Error::NonFinite(_))));
        assert_eq!(state.t, 0, "aborted step must not advance the counter");
    }

    #[test]
    fn noam_schedule_peaks_at_warmup() {
        let sched = LrSchedule::Noam {
            base: 0.02,
            d_model: 64,
            warmup_steps: 200,
        };
        let peak = sched.rate(200);
        for step in [1u64, 50, 199, 201, 400, 10_000] {
            assert!(sched.rate(step) <= peak + 1e-15, "step {step}");
        }
        // strictly rising before, strictly falling after
        assert!(sched.rate(100) < sched.rate(150));
        assert!(sched.rate(300) > sched.rate(400));
    }

    #[test]
    fn noam_matches_closed_form() {
        let sched = LrSchedule::Noam {
            base: 0.02,
            d_model: 512,
            warmup_steps: 8000,
        };
        let manual =
            0.02 * (512f64).powf(-0.5) * (123f64.powf(-0.5)).min(123.0 * 8000f64.powf(-1.5));
        assert!((sched.rate(123) - manual).abs() < 1e-18);
    }
}
