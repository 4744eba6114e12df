//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use crate::tensor::{GradAccum, ParamId, ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter first/second moment accumulators plus a step counter.
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        AdamW { cfg, m, v, step: 0 }
    }

    /// One decoupled-weight-decay update at learning rate `lr`. Parameters
    /// without a gradient entry still receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for idx in 0..store.len() {
            let id = ParamId(idx);
            let n = store.value(id).len();
            if let Some(g) = grads.get(id) {
                if g.len() != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw_step",
                        lhs: vec![n],
                        rhs: vec![g.len()],
                    });
                }
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                for i in 0..n {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                }
                let p = store.value_mut(id);
                for i in 0..n {
                    let m_hat = self.m[idx][i] / bc1;
                    let v_hat = self.v[idx][i] / bc2;
                    p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
                }
            } else {
                let p = store.value_mut(id);
                for x in p.iter_mut() {
                    *x -= lr * c.weight_decay * *x;
                }
            }
        }
        Ok(())
    }
}

// ── Schedule ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(TensorError::InvalidValue {
                op: "Schedule",
                detail: format!(
                    "warmup_steps {} must be < total_steps {}",
                    self.warmup_steps, self.total_steps
                ),
            });
        }
        Ok(())
    }

    /// Linear ramp 0 -> base over warmup, then cosine decay base -> min.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let progress = progress.clamp(0.0, 1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradAccum, ParamStore};

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", vec![v], &[1]);
        (store, id)
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (mut store, id) = scalar_store(1.25);
        let cfg = AdamWConfig { lr: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = GradAccum::new(1);
        g.add(id, &[3.0]);
        opt.step(&mut store, &g, 0.0).unwrap();
        assert_eq!(store.value(id), &[1.25]);
    }

    #[test]
    fn zero_grad_is_pure_decay_shrink() {
        let (mut store, id) = scalar_store(2.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.05, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = GradAccum::new(1);
        g.add(id, &[0.0]);
        opt.step(&mut store, &g, 0.1).unwrap();
        // m, v stay zero, so the update is exactly (1 - lr*wd) scaling
        assert!((store.value(id)[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_computed_reference() {
        let (mut store, id) = scalar_store(0.5);
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut opt = AdamW::new(cfg, &store);

        // hand-stepped reference
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let gval = 1.0f64;
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * gval;
            v = 0.999 * v + 0.001 * gval * gval;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p -= 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * p);

            let mut g = GradAccum::new(1);
            g.add(id, &[gval]);
            opt.step(&mut store, &g, 0.1).unwrap();
            assert!(
                (store.value(id)[0] - p).abs() < 1e-12,
                "step {t}: {} vs {p}",
                store.value(id)[0]
            );
        }
    }

    #[test]
    fn five_step_analytic_fixture_to_1e12() {
        let (mut store, id) = scalar_store(-0.3);
        let cfg = AdamWConfig { lr: 0.02, beta1: 0.85, beta2: 0.99, eps: 1e-8, weight_decay: 0.1 };
        let mut opt = AdamW::new(cfg, &store);
        let grads = [0.5, -1.0, 0.25, 2.0, -0.75];
        let (mut p, mut m, mut v) = (-0.3f64, 0.0f64, 0.0f64);
        for (i, &gval) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.85 * m + 0.15 * gval;
            v = 0.99 * v + 0.01 * gval * gval;
            let m_hat = m / (1.0 - 0.85f64.powi(t));
            let v_hat = v / (1.0 - 0.99f64.powi(t));
            p -= 0.02 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.1 * p);
            let mut g = GradAccum::new(1);
            g.add(id, &[gval]);
            opt.step(&mut store, &g, 0.02).unwrap();
            assert!((store.value(id)[0] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = Schedule { base_lr: 1e-3, min_lr: 1e-5, warmup_steps: 100, total_steps: 1100 };
        s.validate().unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(100) - 1e-3).abs() < 1e-18);
        assert!((s.lr_at(1100) - 1e-5).abs() < 1e-18);
        // halfway through decay: cos(pi/2) = 0
        assert!((s.lr_at(600) - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_warmup() {
        let s = Schedule { base_lr: 1e-3, min_lr: 0.0, warmup_steps: 10, total_steps: 10 };
        assert!(s.validate().is_err());
    }
}
