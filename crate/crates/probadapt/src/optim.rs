//! Adam and a reduce-on-plateau learning-rate schedule, operating on the
//! model's named parameter views.

use crate::error::{Error, Result};
use crate::model::PUNet;
use ndarray::ArrayD;

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8) and
/// bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    /// First/second moment per parameter tensor, in `param_views` order.
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
    names: Vec<String>,
}

impl Adam {
    pub fn new(model: &PUNet, learning_rate: f64) -> Self {
        let views = model.param_views();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: views
                .iter()
                .map(|(_, v)| (ArrayD::zeros(v.raw_dim()), ArrayD::zeros(v.raw_dim())))
                .collect(),
            names: views.into_iter().map(|(n, _)| n).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` per parameter.
    /// `grads` must be the accumulated gradients for exactly this model.
    pub fn step(&mut self, model: &mut PUNet, grads: &PUNet) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let gviews = grads.param_views();
        let pviews = model.param_views_mut();
        if gviews.len() != self.moments.len() || pviews.len() != self.moments.len() {
            return Err(Error::shape_mismatch(
                "adam parameter count",
                self.moments.len(),
                (gviews.len(), pviews.len()),
            ));
        }
        for (i, ((pname, mut p), (gname, g))) in pviews.into_iter().zip(gviews).enumerate() {
            if pname != self.names[i] || gname != self.names[i] {
                return Err(Error::shape_mismatch(
                    "adam parameter order",
                    &self.names[i],
                    (pname, gname),
                ));
            }
            let (m, v) = &mut self.moments[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            });
        }
        Ok(())
    }
}

/// Halves (or otherwise scales) the learning rate when the monitored score
/// stops improving. The monitor is validation dice, so higher is better.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: u32,
    min_delta: f64,
    min_learning_rate: f64,
    best: f64,
    stale: u32,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: u32, min_delta: f64, min_learning_rate: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            min_learning_rate,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Feeds one validation score; returns the possibly reduced rate.
    pub fn observe(&mut self, score: f64, learning_rate: f64) -> f64 {
        if score > self.best + self.min_delta {
            self.best = score;
            self.stale = 0;
            return learning_rate;
        }
        self.stale += 1;
        if self.stale > self.patience {
            self.stale = 0;
            return (learning_rate * self.factor).max(self.min_learning_rate);
        }
        learning_rate
    }
}
