//! Momentum SGD with coupled weight decay and step learning-rate decay.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::net::{Dense, NetGrads, NetParams};

/// Piecewise-constant schedule: the rate is divided by `decay_factor` at each
/// step boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    /// Iterations at which the rate drops, ascending.
    pub steps: Vec<usize>,
}

impl StepSchedule {
    /// Boundaries placed at fractions of `max_iterations`.
    pub fn from_fractions(initial: f64, decay_factor: f64, fractions: &[f64], max_iterations: usize) -> Self {
        let steps = fractions
            .iter()
            .map(|f| (f * max_iterations as f64).round() as usize)
            .collect();
        Self {
            initial,
            decay_factor,
            steps,
        }
    }
}

pub fn lr_at(schedule: &StepSchedule, iteration: usize) -> f64 {
    let passed = schedule.steps.iter().filter(|&&s| iteration >= s).count();
    schedule.initial / schedule.decay_factor.powi(passed as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
fn step_array<D: ndarray::Dimension>(
    w: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    lr: f64,
    cfg: &SgdConfig,
) {
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    Zip::from(w).and(v).and(g).for_each(|w, v, &g| {
        *v = mu * *v + (g + wd * *w);
        *w -= lr * *v;
    });
}

/// Velocity buffers for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetVelocity {
    pub layers: Vec<Dense>,
}

impl NetVelocity {
    pub fn zeros_like(net: &NetParams) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn step(&mut self, net: &mut NetParams, grads: &NetGrads, lr: f64, cfg: &SgdConfig) {
        for ((layer, vel), g) in net.layers.iter_mut().zip(&mut self.layers).zip(grads) {
            step_array(&mut layer.weight, &mut vel.weight, &g.weight, lr, cfg);
            step_array(&mut layer.bias, &mut vel.bias, &g.bias, lr, cfg);
        }
    }
}

/// Velocity buffer for a plain matrix (class centers).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixVelocity(pub Array2<f64>);

impl MatrixVelocity {
    pub fn zeros_like(m: &Array2<f64>) -> Self {
        Self(Array2::zeros(m.dim()))
    }

    pub fn step(&mut self, w: &mut Array2<f64>, g: &Array2<f64>, lr: f64, cfg: &SgdConfig) {
        step_array(w, &mut self.0, g, lr, cfg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_examples() {
        let s = StepSchedule {
            initial: 0.1,
            decay_factor: 10.0,
            steps: vec![100, 200],
        };
        assert_eq!(lr_at(&s, 0), 0.1);
        assert_eq!(lr_at(&s, 50), 0.1);
        assert!((lr_at(&s, 150) - 0.01).abs() < 1e-15);
        assert!((lr_at(&s, 250) - 0.001).abs() < 1e-15);
        assert!((lr_at(&s, 100) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn fractions() {
        let s = StepSchedule::from_fractions(0.05, 10.0, &[0.6, 0.8], 3000);
        assert_eq!(s.steps, vec![1800, 2400]);
    }

    #[test]
    fn momentum_update() {
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut w = array![[1.0]];
        let mut v = MatrixVelocity::zeros_like(&w);
        v.step(&mut w, &array![[1.0]], 0.1, &cfg);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-15);
        v.step(&mut w, &array![[1.0]], 0.1, &cfg);
        // v = 0.9 + 1 = 1.9
        assert!((w[[0, 0]] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.5,
        };
        let mut w = array![[2.0]];
        let mut v = MatrixVelocity::zeros_like(&w);
        v.step(&mut w, &array![[0.0]], 0.1, &cfg);
        assert!((w[[0, 0]] - 1.9).abs() < 1e-15);
    }
}
