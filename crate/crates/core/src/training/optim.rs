use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Scalar;

/// Inverse-square-root schedule with linear warmup, peaking at `peak` when
/// `step == warmup`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl WarmupSchedule {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Optimizer moments, step count and per-epoch history.
#[derive(Clone, Debug, Default)]
pub struct TrainState<S> {
    pub step: usize,
    pub first_moment: BTreeMap<String, Vec<S>>,
    pub second_moment: BTreeMap<String, Vec<S>>,
    pub history: Vec<super::EpochMetrics>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), vec![S::zero(); t.numel()]))
                .collect()
        };
        TrainState {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            history: Vec::new(),
        }
    }
}

/// One Adam update from the gradients stored on `params`, then clears them.
/// A non-finite gradient aborts before anything is modified.
pub fn optimizer_step<S: Scalar>(
    params: &mut ModelParams<S>,
    state: &mut TrainState<S>,
    schedule: &WarmupSchedule,
    adam: &AdamConfig,
) -> Result<f64> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in {name}[{i}] at step {}",
                    g[i],
                    state.step + 1
                )));
            }
        }
    }
    state.step += 1;
    let lr = schedule.lr(state.step);
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2) = (S::of(adam.beta1), S::of(adam.beta2));
    for (name, p) in params.iter_mut() {
        let m = state
            .first_moment
            .get_mut(name)
            .ok_or_else(|| Error::CheckpointIncompatible(format!("no optimizer state for {name}")))?;
        let v = state.second_moment.get_mut(name).expect("moments are created together");
        let grad = p.grad().map(<[S]>::to_vec);
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(S::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (S::one() - b1) * g;
            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
            let mhat = m[i].as_f64() / c1;
            let vhat = v[i].as_f64() / c2;
            data[i] -= S::of(lr * mhat / (vhat.sqrt() + adam.eps));
        }
        p.zero_grad();
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(value: f64) -> ModelParams<f64> {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::new([1], vec![value]).unwrap().with_grad());
        ModelParams::from_map(map)
    }

    #[test]
    fn schedule_shape() {
        let s = WarmupSchedule { peak: 1e-3, warmup: 100 };
        assert!((s.lr(100) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 1e-4).abs() < 1e-15);
        assert!((s.lr(400) - 5e-4).abs() < 1e-15);
        for step in [1, 7, 50, 99, 100, 101, 1000] {
            let (s64, w) = (step as f64, 100f64);
            let expected = s64.powf(-0.5).min(s64 * w.powf(-1.5));
            assert!((s.lr(step) / expected - 1e-3 * 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.5);
        p.get_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        let mut st = TrainState::new(&p);
        let sched = WarmupSchedule { peak: 0.1, warmup: 1 };
        optimizer_step(&mut p, &mut st, &sched, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        let mut st = TrainState::new(&p);
        let sched = WarmupSchedule { peak: 0.01, warmup: 4 };
        let lr = optimizer_step(&mut p, &mut st, &sched, &AdamConfig::default()).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let moved = -p.get("w").unwrap().data()[0];
        assert!((moved - lr / (1.0 + 1e-9)).abs() < 1e-15);
        assert!((lr - sched.lr(1)).abs() < 1e-18);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(0.0);
        p.get_mut("w").unwrap().accumulate_grad(&[f64::NAN]).unwrap();
        let mut st = TrainState::new(&p);
        let sched = WarmupSchedule { peak: 0.01, warmup: 4 };
        let err = optimizer_step(&mut p, &mut st, &sched, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
        assert_eq!(p.get("w").unwrap().data(), &[0.0]);
    }
}
