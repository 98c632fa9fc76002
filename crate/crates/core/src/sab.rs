//! Super augmentation gate.
//!
//! Each unlabeled sample keeps the full history of its consistency losses.
//! When a new loss falls below the OTSU threshold of that history, the sample
//! is flagged and its next strong view receives noise and masking on top of
//! RandAugment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::types::SampleId;

pub const DEFAULT_BINS: usize = 256;

/// OTSU threshold of `values` over `bins` equal-width bins spanning
/// `[min, max]`.
///
/// Candidates are the interior bin edges; the edge maximizing the
/// between-class variance `w0 * w1 * (mu0 - mu1)^2` wins, ties going to the
/// lowest edge. Class means use the raw values, not bin centres. Returns `None`
/// when fewer than two values are given or all values are equal.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Option<f64> {
    if values.len() < 2 || bins < 2 {
        return None;
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return None;
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut sums = vec![0.0f64; bins];
    for &v in values {
        let b = bin_index(v, min, width, bins);
        counts[b] += 1;
        sums[b] += v;
    }
    let n = values.len();
    let total: f64 = sums.iter().sum();

    let mut best: Option<(f64, f64)> = None;
    let (mut n0, mut s0) = (0usize, 0.0f64);
    for k in 1..bins {
        n0 += counts[k - 1];
        s0 += sums[k - 1];
        if n0 == 0 || n0 == n {
            continue;
        }
        let n1 = n - n0;
        let mu0 = s0 / n0 as f64;
        let mu1 = (total - s0) / n1 as f64;
        let w0 = n0 as f64 / n as f64;
        let w1 = n1 as f64 / n as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(b, _)| var > b) {
            best = Some((var, min + k as f64 * width));
        }
    }
    best.map(|(_, t)| t)
}

#[inline]
fn bin_index(v: f64, min: f64, width: f64, bins: usize) -> usize {
    (((v - min) / width) as usize).min(bins - 1)
}

/// Tuning of the gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SabSettings {
    /// Entries a history needs before OTSU is attempted.
    pub min_history: usize,
    pub bins: usize,
    /// Threshold from the pooled history of every sample instead of the
    /// sample's own history.
    pub pooled: bool,
}

impl Default for SabSettings {
    fn default() -> Self {
        Self {
            min_history: 2,
            bins: DEFAULT_BINS,
            pooled: false,
        }
    }
}

/// Outcome of one gate evaluation, kept for the diagnostic dump.
#[derive(Clone, Debug, PartialEq)]
pub struct SabEvent {
    pub sample_id: SampleId,
    pub iteration: u64,
    pub loss: f64,
    pub threshold: Option<f64>,
    pub gated: bool,
}

/// Per-sample consistency-loss histories plus the pending gate flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistoryStore {
    settings: SabSettings,
    histories: BTreeMap<SampleId, Vec<f64>>,
    flags: BTreeSet<SampleId>,
}

impl LossHistoryStore {
    pub fn new(settings: SabSettings) -> Self {
        Self {
            settings,
            ..Self::default()
        }
    }

    pub fn settings(&self) -> SabSettings {
        self.settings
    }

    /// Appends `loss` to the history of `k`.
    pub fn record_loss(&mut self, k: SampleId, loss: f64) -> Result<()> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(domain(format!(
                "consistency loss must be finite and >= 0, got {loss}"
            )));
        }
        self.histories.entry(k).or_default().push(loss);
        Ok(())
    }

    pub fn history(&self, k: SampleId) -> &[f64] {
        self.histories.get(&k).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    /// OTSU threshold that gates sample `k`, if computable.
    pub fn threshold(&self, k: SampleId) -> Option<f64> {
        let own = self.history(k);
        if own.len() < self.settings.min_history {
            return None;
        }
        if self.settings.pooled {
            let pooled: Vec<f64> = self.histories.values().flatten().copied().collect();
            otsu_threshold(&pooled, self.settings.bins)
        } else {
            otsu_threshold(own, self.settings.bins)
        }
    }

    /// True when `current_loss` lies strictly below the threshold of `k`'s
    /// history. Does not modify the store.
    pub fn should_superaugment(&self, k: SampleId, current_loss: f64) -> bool {
        self.threshold(k).is_some_and(|t| current_loss < t)
    }

    /// Evaluates the gate against the existing history, then records the loss
    /// and stores the decision as the flag for the sample's next encounter.
    pub fn observe(&mut self, k: SampleId, loss: f64, iteration: u64) -> Result<SabEvent> {
        let threshold = self.threshold(k);
        let gated = threshold.is_some_and(|t| loss < t);
        self.record_loss(k, loss)?;
        if gated {
            self.flags.insert(k);
        } else {
            self.flags.remove(&k);
        }
        Ok(SabEvent {
            sample_id: k,
            iteration,
            loss,
            threshold,
            gated,
        })
    }

    pub fn is_flagged(&self, k: SampleId) -> bool {
        self.flags.contains(&k)
    }

    /// Clears and returns the pending flag of `k`.
    pub fn take_flag(&mut self, k: SampleId) -> bool {
        self.flags.remove(&k)
    }

    pub fn set_flag(&mut self, k: SampleId) {
        self.flags.insert(k);
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.len()
    }
}

/// Writes gate events as CSV: `sample_id,iteration,loss,threshold,gated`.
pub fn write_events_csv<W: Write>(mut out: W, events: &[SabEvent]) -> std::io::Result<()> {
    writeln!(out, "sample_id,iteration,loss,threshold,gated")?;
    for e in events {
        let threshold = e.threshold.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            e.sample_id, e.iteration, e.loss, threshold, e.gated as u8
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_appends_in_order() {
        let mut s = LossHistoryStore::default();
        s.record_loss(SampleId(3), 0.7).unwrap();
        assert_eq!(s.history(SampleId(3)), &[0.7]);
        s.record_loss(SampleId(3), 0.2).unwrap();
        assert_eq!(s.history(SampleId(3)), &[0.7, 0.2]);
        assert!(s.history(SampleId(4)).is_empty());
        assert!(s.record_loss(SampleId(3), f64::NAN).is_err());
        assert!(s.record_loss(SampleId(3), -0.1).is_err());
        assert_eq!(s.history(SampleId(3)).len(), 2);
    }

    #[test]
    fn otsu_separates_clusters() {
        let t = otsu_threshold(&[0.1, 0.12, 0.9, 0.95], 256).unwrap();
        assert!(t > 0.12 && t < 0.9, "{t}");
    }

    #[test]
    fn otsu_not_computable() {
        assert_eq!(otsu_threshold(&[0.2, 0.2, 0.2], 256), None);
        assert_eq!(otsu_threshold(&[0.2], 256), None);
        assert_eq!(otsu_threshold(&[], 256), None);
    }

    #[test]
    fn gate_examples() {
        let mut s = LossHistoryStore::default();
        for l in [1.2, 1.1, 0.2, 0.15] {
            s.record_loss(SampleId(1), l).unwrap();
        }
        assert!(s.should_superaugment(SampleId(1), 0.05));
        assert!(!s.should_superaugment(SampleId(1), 5.0));

        let mut short = LossHistoryStore::default();
        short.record_loss(SampleId(2), 0.5).unwrap();
        assert!(!short.should_superaugment(SampleId(2), 0.0));
    }

    #[test]
    fn observe_gates_before_recording() {
        let mut s = LossHistoryStore::default();
        for l in [1.2, 1.1, 0.2, 0.15] {
            s.record_loss(SampleId(1), l).unwrap();
        }
        let e = s.observe(SampleId(1), 0.05, 10).unwrap();
        assert!(e.gated);
        assert_eq!(s.history(SampleId(1)).len(), 5);
        assert!(s.take_flag(SampleId(1)));
        assert!(!s.take_flag(SampleId(1)));
        let e = s.observe(SampleId(1), 2.0, 11).unwrap();
        assert!(!e.gated);
        assert!(!s.is_flagged(SampleId(1)));
    }

    #[test]
    fn pooled_mode_uses_all_histories() {
        let mut s = LossHistoryStore::new(SabSettings {
            pooled: true,
            ..SabSettings::default()
        });
        for l in [1.0, 1.1] {
            s.record_loss(SampleId(1), l).unwrap();
        }
        for l in [0.1, 0.12] {
            s.record_loss(SampleId(2), l).unwrap();
        }
        let t = s.threshold(SampleId(1)).unwrap();
        // equal separations tie, so the lowest separating edge wins
        assert!(t > 0.12 && t < 0.13, "{t}");
        assert!(!s.should_superaugment(SampleId(1), 0.5));
        assert!(s.should_superaugment(SampleId(1), 0.11));
        let own = LossHistoryStore {
            settings: SabSettings::default(),
            ..s.clone()
        };
        assert!(own.should_superaugment(SampleId(1), 0.5));
    }

    #[test]
    fn events_csv_layout() {
        let mut buf = Vec::new();
        write_events_csv(
            &mut buf,
            &[SabEvent {
                sample_id: SampleId(4),
                iteration: 2,
                loss: 0.5,
                threshold: None,
                gated: false,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_id,iteration,loss,threshold,gated\n4,2,0.5,,0\n"
        );
    }
}
