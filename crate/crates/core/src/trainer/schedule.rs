use serde::{Deserialize, Serialize};

/// Cosine decay that stops at `7/16` of a half period, so the rate at the
/// last step is still positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eta: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(eta: f64, total_steps: u64) -> Self {
        Self { eta, total_steps }
    }

    pub fn at(&self, g: u64) -> f64 {
        lr_at(self.eta, g, self.total_steps)
    }
}

/// `eta * cos(7 pi g / (16 G))`.
pub fn lr_at(eta: f64, g: u64, total_steps: u64) -> f64 {
    debug_assert!(g <= total_steps && total_steps > 0);
    eta * (7.0 * std::f64::consts::PI * g as f64 / (16.0 * total_steps as f64)).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_at(0.03, 0, 2000), 0.03);
        let end = lr_at(0.03, 2000, 2000);
        assert!((end - 0.005_852_709_660_483_85).abs() < 1e-12, "{end}");
    }

    #[test]
    fn decreasing_and_positive() {
        let s = Schedule::new(0.03, 100);
        let mut prev = f64::INFINITY;
        for g in 0..=100 {
            let lr = s.at(g);
            assert!(lr > 0.0 && lr < prev);
            prev = lr;
        }
    }
}
