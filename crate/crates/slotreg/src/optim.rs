//! Adam with linear warmup and exponential learning-rate decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{snap_f32, ParamSet, TapedParams};
use crate::tape::{Arr, Grads};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Linear warmup from 0 over this many steps; 0 disables warmup.
    pub warmup_steps: usize,
    /// After warmup the rate halves every this many steps; 0 disables decay.
    pub decay_half_life: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 4e-4,
            warmup_steps: 1000,
            decay_half_life: 25000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Learning rate applied on `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = (step + 1) as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (s / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.decay_half_life == 0 {
            1.0
        } else {
            let past = (s - self.warmup_steps as f64).max(0.0);
            0.5f64.powf(past / self.decay_half_life as f64)
        };
        self.lr * warm * decay
    }
}

/// Adam state; one first/second moment buffer per parameter.
pub struct Adam {
    cfg: OptimConfig,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    t: usize,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: OptimConfig) -> Adam {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, value) in params.iter() {
            m.insert(name.clone(), ArrayD::zeros(value.raw_dim()));
            v.insert(name.clone(), ArrayD::zeros(value.raw_dim()));
        }
        Adam { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update over every parameter.  Leaves without a gradient are
    /// treated as having gradient zero, so unused parts of the model (for
    /// example the projection head in baseline mode) hold still from
    /// initialization.  Updated values are snapped back onto the f32 grid,
    /// keeping the in-memory state exactly checkpoint-representable.
    pub fn step(&mut self, params: &mut ParamSet, taped: &TapedParams, grads: &Grads) {
        let lr = self.cfg.lr_at(self.t);
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let var = taped.var(&name);
            let theta = params.get_mut(&name);
            let m = self.m.get_mut(&name).expect("moment buffer exists");
            let v = self.v.get_mut(&name).expect("moment buffer exists");
            match grads.get(var) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                    });
                    ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|m| BETA1 * m);
                    v.mapv_inplace(|v| BETA2 * v);
                }
            }
            ndarray::Zip::from(&mut *theta)
                .and(&*m)
                .and(&*v)
                .for_each(|t, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *t -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
            snap_f32(theta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::IxDyn;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            decay_half_life: 100,
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(4) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        // One half-life past warmup the rate is halved.
        assert!((cfg.lr_at(109) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(209) - 0.25).abs() < 1e-12);
        let flat = OptimConfig {
            lr: 2.0,
            warmup_steps: 0,
            decay_half_life: 0,
        };
        assert_eq!(flat.lr_at(0), 2.0);
        assert_eq!(flat.lr_at(12345), 2.0);
    }

    /// Minimizing a convex quadratic must drive the parameter to its optimum.
    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let cfg = OptimConfig {
            lr: 0.05,
            warmup_steps: 0,
            decay_half_life: 0,
        };
        let mut adam = Adam::new(&params, cfg);
        for _ in 0..400 {
            let mut t = Tape::new();
            let taped = TapedParams::leaves(&mut t, &params);
            let x = taped.var("x");
            let sq = t.square(x);
            let loss = t.sum_all(sq);
            let grads = t.backward(loss);
            adam.step(&mut params, &taped, &grads);
        }
        for &v in params.get("x").iter() {
            assert!(v.abs() < 1e-2, "did not converge, x = {v}");
        }
    }

    /// A parameter that never receives a gradient must not move.
    #[test]
    fn ungraded_parameters_hold_still() {
        let mut params = ParamSet::new();
        params.insert("used", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        params.insert("unused", ArrayD::from_elem(IxDyn(&[1]), 0.75));
        let mut adam = Adam::new(&params, OptimConfig::default());
        for _ in 0..5 {
            let mut t = Tape::new();
            let taped = TapedParams::leaves(&mut t, &params);
            let x = taped.var("used");
            let sq = t.square(x);
            let loss = t.sum_all(sq);
            let grads = t.backward(loss);
            adam.step(&mut params, &taped, &grads);
        }
        assert_eq!(params.get("unused")[[0]], 0.75);
        assert_ne!(params.get("used")[[0]], 1.0);
    }

    /// Updates land exactly on the f32 grid.
    #[test]
    fn updates_stay_on_the_f32_grid() {
        let mut params = ParamSet::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let mut adam = Adam::new(&params, OptimConfig::default());
        let mut t = Tape::new();
        let taped = TapedParams::leaves(&mut t, &params);
        let x = taped.var("x");
        let sq = t.square(x);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        adam.step(&mut params, &taped, &grads);
        for &v in params.get("x").iter() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
