//! AdamW with decoupled weight decay and linear learning-rate warmup.

use super::param::Param;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_steps: 500,
        }
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    t: usize,
    state: HashMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Effective learning rate for the step that was just taken.
    pub fn current_lr(&self) -> f64 {
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (self.t as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        self.cfg.lr * warm
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param)]) {
        self.t += 1;
        let lr = self.current_lr() as f32;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let bc1 = (1.0 - self.cfg.beta1.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - self.cfg.beta2.powi(self.t as i32)) as f32;
        let eps = self.cfg.eps as f32;
        let wd = self.cfg.weight_decay as f32;
        for (name, p) in params.iter_mut() {
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; p.w.len()],
                v: vec![0.0; p.w.len()],
            });
            assert_eq!(slot.m.len(), p.w.len(), "optimizer state shape drift for {name}");
            for j in 0..p.w.len() {
                let g = p.g[j];
                let m = b1 * slot.m[j] + (1.0 - b1) * g;
                let v = b2 * slot.v[j] + (1.0 - b2) * g * g;
                slot.m[j] = m;
                slot.v[j] = v;
                let upd = (m / bc1) / ((v / bc2).sqrt() + eps) + wd * p.w[j];
                p.w[j] -= lr * upd;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = Param::from_vec(&[2], vec![1.0, -2.0]);
        p.g = vec![0.5, 0.5];
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            warmup_steps: 0,
            ..Default::default()
        });
        let mut params = vec![("p".to_string(), &mut p)];
        opt.step(&mut params);
        assert_eq!(p.w, vec![1.0, -2.0]);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-3,
            warmup_steps: 10,
            ..Default::default()
        });
        let mut p = Param::from_vec(&[1], vec![0.0]);
        let mut params = vec![("p".to_string(), &mut p)];
        opt.step(&mut params);
        assert!((opt.current_lr() - 1e-4).abs() < 1e-12);
        for _ in 0..9 {
            opt.step(&mut params);
        }
        assert!((opt.current_lr() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize f(x) = x² from x = 1
        let mut p = Param::from_vec(&[1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..200 {
            p.g[0] = 2.0 * p.w[0];
            let mut params = vec![("p".to_string(), &mut p)];
            opt.step(&mut params);
        }
        assert!(p.w[0].abs() < 0.05, "x did not descend: {}", p.w[0]);
    }
}
