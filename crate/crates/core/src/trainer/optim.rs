//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::head::HeadParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn check(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if !betas_ok || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update: `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut HeadParams,
    grads: &HeadParams,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let shapes = |p: &HeadParams| p.slices().map(<[f64]>::len);
    if shapes(params) != shapes(grads) || shapes(params) != shapes(&state.m) {
        return Err(Error::Shape("optimizer state, params and grads disagree".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let g_all = grads.slices();
    let m_all = state.m.slices_mut();
    let v_all = state.v.slices_mut();
    let p_all = params.slices_mut();
    for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// `min + ½(base − min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    let total = total_steps.max(1);
    let frac = step.min(total) as f64 / total as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn one_param(v: f64) -> HeadParams {
        let mut p = HeadParams::zeros(1, 1, 1);
        p.w1 = Array2::from_elem((1, 1), v);
        p
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let mut p = HeadParams::init(3, 4, 2, &mut rng);
        p.b1 = array![0.5, -1.0, 2.0, 0.25];
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let g = p.zeros_like();
        adamw_step(&mut st, &mut p, &g, 0.1, &AdamWConfig::default()).unwrap();
        for (a, b) in p.slices().iter().zip(before.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, y - 0.1 * (0.05 * y));
                assert!((x - y * 0.995).abs() < 1e-15);
            }
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn no_decay_no_gradient_is_identity() {
        let mut p = one_param(1.7);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let zero = p.zeros_like();
        adamw_step(&mut st, &mut p, &zero, 0.3, &cfg).unwrap();
        assert_eq!(p, one_param(1.7));
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for &g in &[0.3, -2.0, 1e-9] {
            let mut p = one_param(1.0);
            let mut st = OptimizerState::new(&p);
            adamw_step(&mut st, &mut p, &one_param(g), 0.01, &cfg).unwrap();
            // after bias correction m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε)
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p.w1[[0, 0]] - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let p0 = HeadParams::init(3, 4, 2, &mut rng);
        let g = HeadParams::init(3, 4, 2, &mut rng);
        let run = || {
            let mut p = p0.clone();
            let mut st = OptimizerState::new(&p);
            adamw_step(&mut st, &mut p, &g, 1e-3, &AdamWConfig::default()).unwrap();
            adamw_step(&mut st, &mut p, &g, 1e-3, &AdamWConfig::default()).unwrap();
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(sa, sb);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1.0, 0.1), 1.0);
        assert!((cosine_lr(100, 100, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, 2.25e-7, 0.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
