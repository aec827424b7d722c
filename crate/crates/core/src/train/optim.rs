//! Adam and the warmup-cosine learning-rate schedule.

use ndarray::{Array2, Zip};

use crate::model::net::Trainable;
use crate::model::Weights;
use crate::train::{Schedule, TrainConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Linear warmup from 0 to the peak, then cosine decay to 0 at the final step.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Cosine => {
            let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
            let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

pub struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    pub fn new(like: &Weights) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    /// One update of the trainable groups; frozen tensors are untouched.
    pub fn step(&mut self, w: &mut Weights, grads: &Weights, lr: f64, tr: &Trainable) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        self.m.zip_mut(grads, |_, group, m, g| {
            if tr.wants(group) {
                Zip::from(m).and(g).for_each(|m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            }
        });
        self.v.zip_mut(grads, |_, group, v, g| {
            if tr.wants(group) {
                Zip::from(v).and(g).for_each(|v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            }
        });
        let mut moments: Vec<(&Array2<f64>, &Array2<f64>)> = Vec::new();
        let mut firsts = Vec::new();
        self.m.for_each(|_, _, t| firsts.push(t));
        let mut i = 0;
        self.v.for_each(|_, _, t| {
            moments.push((firsts[i], t));
            i += 1;
        });
        let mut i = 0;
        w.for_each_mut(|_, group, t| {
            let (m, v) = moments[i];
            i += 1;
            if tr.wants(group) && lr != 0.0 {
                Zip::from(t).and(m).and(v).for_each(|x, &m, &v| *x -= lr * (m / c1) / ((v / c2).sqrt() + EPS));
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_ramps_linearly() {
        let cfg = TrainConfig { learning_rate: 1e-3, warmup_steps: 10, steps: 100, ..TrainConfig::default() };
        assert_eq!(learning_rate(&cfg, 0), 0.0);
        assert!((learning_rate(&cfg, 5) - 5e-4).abs() < 1e-15);
        assert!((learning_rate(&cfg, 10) - 1e-3).abs() < 1e-15);
        assert!(learning_rate(&cfg, 55) < learning_rate(&cfg, 20));
        assert!(learning_rate(&cfg, 100).abs() < 1e-15);
    }
}
