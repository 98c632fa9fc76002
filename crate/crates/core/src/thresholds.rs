//! Self-adaptive pseudo-label thresholds.
//!
//! A global confidence estimate and per-class estimates are tracked as
//! exponential moving averages of the model's predictions on weakly augmented
//! unlabeled clips. The threshold for class `c` is the global estimate scaled
//! by the max-normalised local estimate of `c`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::types::{argmax, Prediction};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;
pub const DEFAULT_FIXED_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    tau_global: f64,
    p_local: Vec<f64>,
    h_local: Vec<f64>,
    ema_momentum: f64,
    /// When set, every class uses this constant instead of the adaptive value.
    fixed: Option<f64>,
}

impl ThresholdState {
    /// Uniform initial state: every estimate equals `1 / num_classes`.
    pub fn new(num_classes: usize) -> Result<Self> {
        Self::with_momentum(num_classes, DEFAULT_EMA_MOMENTUM)
    }

    pub fn with_momentum(num_classes: usize, ema_momentum: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(domain(format!("need at least 2 classes, got {num_classes}")));
        }
        if !(ema_momentum > 0.0 && ema_momentum <= 1.0) {
            return Err(domain(format!("EMA momentum must be in (0, 1], got {ema_momentum}")));
        }
        let u = 1.0 / num_classes as f64;
        Ok(Self {
            tau_global: u,
            p_local: vec![u; num_classes],
            h_local: vec![u; num_classes],
            ema_momentum,
            fixed: None,
        })
    }

    /// Switches the state into fixed-threshold mode.
    pub fn with_fixed(mut self, threshold: f64) -> Self {
        self.fixed = Some(threshold);
        self
    }

    pub fn tau_global(&self) -> f64 {
        self.tau_global
    }

    pub fn p_local(&self) -> &[f64] {
        &self.p_local
    }

    pub fn h_local(&self) -> &[f64] {
        &self.h_local
    }

    pub fn ema_momentum(&self) -> f64 {
        self.ema_momentum
    }

    pub fn fixed(&self) -> Option<f64> {
        self.fixed
    }

    pub fn num_classes(&self) -> usize {
        self.p_local.len()
    }

    /// Folds a batch of weak-view predictions into the moving averages. An
    /// empty batch leaves the state untouched.
    pub fn update(&mut self, weak_preds: &[Prediction]) {
        if weak_preds.is_empty() {
            return;
        }
        let n = weak_preds.len() as f64;
        let m = self.ema_momentum;
        let classes = self.num_classes();

        let mean_max = weak_preds.iter().map(Prediction::max).sum::<f64>() / n;
        let mut mean_probs = vec![0.0; classes];
        let mut hist = vec![0.0; classes];
        for p in weak_preds {
            for (acc, &v) in mean_probs.iter_mut().zip(p.probs()) {
                *acc += v;
            }
            hist[p.argmax()] += 1.0;
        }

        self.tau_global = m * self.tau_global + (1.0 - m) * mean_max;
        for c in 0..classes {
            self.p_local[c] = m * self.p_local[c] + (1.0 - m) * mean_probs[c] / n;
            self.h_local[c] = m * self.h_local[c] + (1.0 - m) * hist[c] / n;
        }
    }

    /// Confidence a prediction of class `c` must exceed to become a pseudo-label.
    pub fn tau_final(&self, c: usize) -> f64 {
        if let Some(t) = self.fixed {
            return t;
        }
        let max = self.p_local[argmax(&self.p_local)];
        self.p_local[c] / max * self.tau_global
    }

    /// Whether `pred` is confident enough to act as a pseudo-label.
    pub fn passes(&self, pred: &Prediction) -> bool {
        pred.max() > self.tau_final(pred.argmax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_uniform() {
        let s = ThresholdState::new(9).unwrap();
        assert!((s.tau_global() - 1.0 / 9.0).abs() < 1e-15);
        let s = ThresholdState::new(2).unwrap();
        assert_eq!(s.p_local(), &[0.5, 0.5]);
        assert_eq!(s.h_local(), &[0.5, 0.5]);
        assert!(ThresholdState::new(1).is_err());
    }

    #[test]
    fn ema_matches_hand_arithmetic() {
        let mut s = ThresholdState::new(9).unwrap();
        let mut probs = vec![0.0625; 9];
        probs[0] = 0.5;
        let pred = Prediction::new(probs).unwrap();
        s.update(&[pred]);
        let expected = 0.999 * (1.0 / 9.0) + 0.001 * 0.5;
        assert!((s.tau_global() - expected).abs() < 1e-12);
        assert!((s.tau_global() - 0.11149).abs() < 1e-5);
    }

    #[test]
    fn unit_momentum_freezes_state() {
        let mut s = ThresholdState::with_momentum(3, 1.0).unwrap();
        let before = s.clone();
        s.update(&[Prediction::new(vec![0.8, 0.1, 0.1]).unwrap()]);
        assert_eq!(s, before);
    }

    #[test]
    fn histogram_stays_on_simplex() {
        let mut s = ThresholdState::with_momentum(3, 0.7).unwrap();
        for _ in 0..20 {
            s.update(&[
                Prediction::new(vec![0.8, 0.1, 0.1]).unwrap(),
                Prediction::new(vec![0.2, 0.7, 0.1]).unwrap(),
            ]);
        }
        assert!((s.h_local().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.h_local().iter().all(|&h| h >= 0.0));
    }

    #[test]
    fn tau_final_scales_by_max_norm() {
        let mut s = ThresholdState::new(3).unwrap();
        s.p_local = vec![0.2, 0.4, 0.4];
        s.tau_global = 0.6;
        let t: Vec<f64> = (0..3).map(|c| s.tau_final(c)).collect();
        assert!((t[0] - 0.3).abs() < 1e-12);
        assert_eq!(t[1], 0.6);
        assert_eq!(t[2], 0.6);
    }

    #[test]
    fn uniform_local_gives_global_everywhere() {
        let s = ThresholdState::new(5).unwrap();
        for c in 0..5 {
            assert_eq!(s.tau_final(c), s.tau_global());
        }
    }

    #[test]
    fn fixed_mode_ignores_state() {
        let mut s = ThresholdState::new(4).unwrap().with_fixed(0.95);
        s.update(&[Prediction::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap()]);
        for c in 0..4 {
            assert_eq!(s.tau_final(c), 0.95);
        }
    }
}
