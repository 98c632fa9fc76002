//! The four training objectives and their weighted sum.
//!
//! Value functions take probabilities, matching how the objectives are
//! usually written. The `*_grad` variants take raw logits and also return the
//! analytic gradient with respect to those logits; they evaluate the loss
//! through the same value functions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::thresholds::ThresholdState;
use crate::types::{argmax, Prediction, PseudoLabeledSample, SampleId};

/// Floor applied inside every logarithm and denominator.
pub const EPS: f64 = 1e-12;

/// `-sum_c target[c] * ln(max(pred[c], EPS))`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> f64 {
    debug_assert_eq!(target.len(), pred.len());
    -target
        .iter()
        .zip(pred)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.max(EPS).ln() })
        .sum::<f64>()
}

/// Binary cross-entropy of target `z` against probability `d`.
pub fn binary_cross_entropy(z: f64, d: f64) -> f64 {
    let d = d.clamp(EPS, 1.0 - EPS);
    -(z * d.ln() + (1.0 - z) * (1.0 - d).ln())
}

/// Entropy `-sum a ln a`.
pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

/// `x / sum(x)`.
pub fn sum_norm(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().sum::<f64>().max(EPS);
    x.iter().map(|v| v / s).collect()
}

/// `x / max(x)`.
pub fn max_norm(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(EPS);
    x.iter().map(|v| v / m).collect()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Supervised loss over a labeled batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisedLoss {
    pub value: f64,
    /// Set when the batch was empty and the value defaulted to zero.
    pub empty: bool,
}

/// Mean cross-entropy of one-hot `labels` against `preds`.
pub fn supervised_loss(labels: &[usize], preds: &[Prediction]) -> SupervisedLoss {
    assert_eq!(labels.len(), preds.len(), "labels and predictions must align");
    if labels.is_empty() {
        log::warn!("supervised loss over an empty batch");
        return SupervisedLoss {
            value: 0.0,
            empty: true,
        };
    }
    let total: f64 = labels
        .iter()
        .zip(preds)
        .map(|(&y, p)| -p.probs()[y].max(EPS).ln())
        .sum();
    SupervisedLoss {
        value: total / labels.len() as f64,
        empty: false,
    }
}

/// Alignment loss over interpolated samples: `rho` times the soft-label
/// cross-entropy plus the sample's `lambda` times the discriminator's binary
/// cross-entropy, averaged over the batch.
pub fn alignment_loss(
    samples: &[PseudoLabeledSample],
    cls_preds: &[Prediction],
    disc_outs: &[f64],
    rho: f64,
) -> f64 {
    assert_eq!(samples.len(), cls_preds.len());
    assert_eq!(samples.len(), disc_outs.len());
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .zip(cls_preds)
        .zip(disc_outs)
        .map(|((s, p), &d)| {
            rho * cross_entropy(&s.soft_label, p.probs())
                + s.lambda * binary_cross_entropy(s.disc_label(), d)
        })
        .sum();
    total / samples.len() as f64
}

/// Consistency loss together with its per-sample bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Consistency {
    pub loss: f64,
    /// Whether each weak prediction cleared its class threshold.
    pub mask: Vec<bool>,
    /// Per-sample loss of the unmasked samples only.
    pub per_sample: BTreeMap<SampleId, f64>,
}

/// Masked cross-entropy between the hard pseudo-label of each weak prediction
/// and the matching strong prediction, averaged over the whole batch.
pub fn consistency_loss(
    weak: &[Prediction],
    strong: &[Prediction],
    state: &ThresholdState,
    ids: &[SampleId],
) -> Consistency {
    assert_eq!(weak.len(), strong.len());
    assert_eq!(weak.len(), ids.len());
    if weak.is_empty() {
        return Consistency::default();
    }
    let mut out = Consistency {
        mask: Vec::with_capacity(weak.len()),
        ..Consistency::default()
    };
    let mut total = 0.0;
    for ((q, big_q), &id) in weak.iter().zip(strong).zip(ids) {
        let pass = state.passes(q);
        out.mask.push(pass);
        if pass {
            let l = -big_q.probs()[q.argmax()].max(EPS).ln();
            total += l;
            out.per_sample.insert(id, l);
        }
    }
    out.loss = total / weak.len() as f64;
    out
}

/// Target distribution of the fairness term: `SumNorm(p_local / h_local)`.
fn fairness_target(state: &ThresholdState) -> Vec<f64> {
    let ratio: Vec<f64> = state
        .p_local()
        .iter()
        .zip(state.h_local())
        .map(|(p, h)| p / h.max(EPS))
        .collect();
    sum_norm(&ratio)
}

/// Normalised class histogram of the argmax of `probs`.
fn argmax_histogram<'a>(probs: impl Iterator<Item = &'a [f64]>, classes: usize) -> Vec<f64> {
    let mut hist = vec![0.0; classes];
    let mut n = 0.0;
    for p in probs {
        hist[argmax(p)] += 1.0;
        n += 1.0;
    }
    hist.iter().map(|h| h / n).collect()
}

/// Class fairness loss `-H(SumNorm(p_local / h_local), SumNorm(p_bar / h_bar))`
/// over the unmasked strong predictions. Zero when every sample is masked.
pub fn fairness_loss(state: &ThresholdState, strong: &[Prediction], mask: &[bool]) -> f64 {
    assert_eq!(strong.len(), mask.len());
    let kept: Vec<&[f64]> = strong
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.probs())
        .collect();
    if kept.is_empty() {
        return 0.0;
    }
    let classes = state.num_classes();
    let target = fairness_target(state);
    let p_bar = mean_rows(&kept, classes);
    let h_bar = argmax_histogram(kept.iter().copied(), classes);
    let ratio: Vec<f64> = p_bar.iter().zip(&h_bar).map(|(p, h)| p / h.max(EPS)).collect();
    -cross_entropy(&target, &sum_norm(&ratio))
}

fn mean_rows(rows: &[&[f64]], classes: usize) -> Vec<f64> {
    let mut mean = vec![0.0; classes];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Loss weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub cons: f64,
    pub fair: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            align: 1.0,
            cons: 1.0,
            fair: 1.0,
        }
    }
}

/// All loss terms of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_cs: f64,
    pub l_align: f64,
    pub l_cons: f64,
    pub l_fair: f64,
    pub total: f64,
    pub per_sample_cons: BTreeMap<SampleId, f64>,
}

impl LossBreakdown {
    pub fn new(
        l_cs: f64,
        l_align: f64,
        l_cons: f64,
        l_fair: f64,
        weights: LossWeights,
        per_sample_cons: BTreeMap<SampleId, f64>,
    ) -> Self {
        Self {
            l_cs,
            l_align,
            l_cons,
            l_fair,
            total: total_loss(l_cs, l_align, l_cons, l_fair, weights),
            per_sample_cons,
        }
    }
}

/// `l_cs + w_a * l_align + w_c * l_cons + w_f * l_fair`.
pub fn total_loss(l_cs: f64, l_align: f64, l_cons: f64, l_fair: f64, w: LossWeights) -> f64 {
    l_cs + w.align * l_align + w.cons * l_cons + w.fair * l_fair
}

// ---------------------------------------------------------------------------
// Gradients with respect to logits
// ---------------------------------------------------------------------------

/// Pulls a gradient with respect to probabilities back through softmax.
fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// Gradient of `cross_entropy(target, p)` with respect to `p`.
fn cross_entropy_dp(target: &[f64], p: &[f64]) -> Vec<f64> {
    target
        .iter()
        .zip(p)
        .map(|(&t, &pi)| if pi > EPS { -t / pi } else { 0.0 })
        .collect()
}

fn predictions(logits: &[Vec<f64>]) -> Vec<Prediction> {
    logits.iter().map(|z| Prediction::from_logits(z)).collect()
}

/// Supervised loss and its gradient with respect to the labeled logits.
pub fn supervised_loss_grad(labels: &[usize], logits: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let preds = predictions(logits);
    let value = supervised_loss(labels, &preds).value;
    let n = labels.len().max(1) as f64;
    let grads = labels
        .iter()
        .zip(&preds)
        .map(|(&y, p)| {
            let mut target = vec![0.0; p.num_classes()];
            target[y] = 1.0;
            let dp = cross_entropy_dp(&target, p.probs());
            softmax_backward(p.probs(), &dp)
                .into_iter()
                .map(|g| g / n)
                .collect()
        })
        .collect();
    (value, grads)
}

/// Alignment loss and its gradients with respect to classifier logits and
/// discriminator pre-activations.
pub fn alignment_loss_grad(
    samples: &[PseudoLabeledSample],
    cls_logits: &[Vec<f64>],
    disc_logits: &[f64],
    rho: f64,
) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let preds = predictions(cls_logits);
    let disc: Vec<f64> = disc_logits.iter().map(|&s| sigmoid(s)).collect();
    let value = alignment_loss(samples, &preds, &disc, rho);
    let n = samples.len().max(1) as f64;
    let mut d_cls = Vec::with_capacity(samples.len());
    let mut d_disc = Vec::with_capacity(samples.len());
    for ((s, p), &d) in samples.iter().zip(&preds).zip(&disc) {
        let dp = cross_entropy_dp(&s.soft_label, p.probs());
        d_cls.push(
            softmax_backward(p.probs(), &dp)
                .into_iter()
                .map(|g| rho * g / n)
                .collect(),
        );
        let z = s.disc_label();
        let dd = if d > EPS && d < 1.0 - EPS {
            // d/ds of BCE(z, sigmoid(s))
            d - z
        } else {
            0.0
        };
        d_disc.push(s.lambda * dd / n);
    }
    (value, d_cls, d_disc)
}

/// Consistency loss and its gradient with respect to the strong-view logits.
/// Weak predictions act as fixed targets.
pub fn consistency_loss_grad(
    weak: &[Prediction],
    strong_logits: &[Vec<f64>],
    state: &ThresholdState,
    ids: &[SampleId],
) -> (Consistency, Vec<Vec<f64>>) {
    let strong = predictions(strong_logits);
    let out = consistency_loss(weak, &strong, state, ids);
    let n = weak.len().max(1) as f64;
    let grads = weak
        .iter()
        .zip(&strong)
        .zip(&out.mask)
        .map(|((q, p), &pass)| {
            if !pass {
                return vec![0.0; p.num_classes()];
            }
            let mut target = vec![0.0; p.num_classes()];
            target[q.argmax()] = 1.0;
            let dp = cross_entropy_dp(&target, p.probs());
            softmax_backward(p.probs(), &dp)
                .into_iter()
                .map(|g| g / n)
                .collect()
        })
        .collect();
    (out, grads)
}

/// Fairness loss and its gradient with respect to the strong-view logits.
/// The argmax histogram and the threshold state are treated as constants.
pub fn fairness_loss_grad(
    state: &ThresholdState,
    strong_logits: &[Vec<f64>],
    mask: &[bool],
) -> (f64, Vec<Vec<f64>>) {
    let strong = predictions(strong_logits);
    let value = fairness_loss(state, &strong, mask);
    let classes = state.num_classes();
    let mut grads = vec![vec![0.0; classes]; strong.len()];
    let kept: Vec<usize> = (0..strong.len()).filter(|&i| mask[i]).collect();
    if kept.is_empty() {
        return (value, grads);
    }
    let rows: Vec<&[f64]> = kept.iter().map(|&i| strong[i].probs()).collect();
    let target = fairness_target(state);
    let p_bar = mean_rows(&rows, classes);
    let h_bar = argmax_histogram(rows.iter().copied(), classes);
    let scale: Vec<f64> = h_bar.iter().map(|h| 1.0 / h.max(EPS)).collect();
    let ratio: Vec<f64> = p_bar.iter().zip(&scale).map(|(p, s)| p * s).collect();
    let sum: f64 = ratio.iter().sum::<f64>().max(EPS);
    let b: Vec<f64> = ratio.iter().map(|r| r / sum).collect();

    // value = sum_c a_c ln(max(b_c, EPS))
    let d_b: Vec<f64> = target
        .iter()
        .zip(&b)
        .map(|(&a, &bc)| if bc > EPS { a / bc } else { 0.0 })
        .collect();
    let dot: f64 = d_b.iter().zip(&b).map(|(g, bc)| g * bc).sum();
    let d_pbar: Vec<f64> = d_b
        .iter()
        .zip(&scale)
        .map(|(g, s)| (g - dot) / sum * s)
        .collect();
    let m = kept.len() as f64;
    for &i in &kept {
        let dp: Vec<f64> = d_pbar.iter().map(|g| g / m).collect();
        grads[i] = softmax_backward(strong[i].probs(), &dp);
    }
    (value, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN9: f64 = 2.197_224_577_336_219_4;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn cross_entropy_examples() {
        let oh = vec![0.0, 1.0, 0.0];
        assert_eq!(cross_entropy(&oh, &oh), 0.0);
        let mut t = vec![0.0; 9];
        t[4] = 1.0;
        assert!((cross_entropy(&t, &uniform(9)) - LN9).abs() < 1e-12);
        assert!((cross_entropy(&[0.6, 0.4], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn supervised_examples() {
        let perfect = vec![Prediction::new(vec![1.0, 0.0]).unwrap(); 3];
        assert_eq!(supervised_loss(&[0, 0, 0], &perfect).value, 0.0);
        let u = Prediction::new(uniform(9)).unwrap();
        assert!((supervised_loss(&[3], &[u.clone()]).value - LN9).abs() < 1e-12);
        let p = Prediction::new(vec![0.25, 0.75]).unwrap();
        let mean = supervised_loss(&[0, 1], &[p.clone(), p.clone()]).value;
        let expected = (-(0.25f64).ln() - (0.75f64).ln()) / 2.0;
        assert!((mean - expected).abs() < 1e-12);
        let empty = supervised_loss(&[], &[]);
        assert!(empty.empty);
        assert_eq!(empty.value, 0.0);
    }

    fn pseudo(soft: Vec<f64>, lambda: f64) -> PseudoLabeledSample {
        PseudoLabeledSample {
            video: crate::types::VideoTensor::zeros([1, 1, 1, 1]).unwrap(),
            soft_label: soft,
            lambda,
        }
    }

    #[test]
    fn alignment_examples() {
        let s = pseudo(vec![1.0, 0.0], 1.0);
        let p = Prediction::new(vec![1.0, 0.0]).unwrap();
        assert!(alignment_loss(&[s], &[p], &[1e-15], 1.0) < 1e-11);

        let s = pseudo(vec![0.0, 1.0], 0.0);
        let p = Prediction::new(vec![0.3, 0.7]).unwrap();
        let d = 0.8;
        let v = alignment_loss(&[s], &[p], &[d], 0.0);
        // lambda weights the discriminator term, so lambda = 0 removes it
        assert_eq!(v, 0.0);

        let s = pseudo(vec![0.6, 0.4], 0.6);
        let p = Prediction::new(vec![0.5, 0.5]).unwrap();
        let v = alignment_loss(&[s], &[p], &[0.5], 1.0);
        assert!((v - 1.6 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 1.1090).abs() < 1e-4);
    }

    #[test]
    fn alignment_discriminator_term_in_isolation() {
        // rho = 0 and lambda = 1 leaves only BCE(0, d)
        let s = pseudo(vec![1.0, 0.0], 1.0);
        let p = Prediction::new(vec![0.5, 0.5]).unwrap();
        let v = alignment_loss(&[s], &[p], &[0.3], 0.0);
        assert!((v + (0.7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let state = ThresholdState::new(2).unwrap().with_fixed(0.95);
        let weak = vec![Prediction::new(vec![0.6, 0.4]).unwrap()];
        let strong = vec![Prediction::new(vec![0.5, 0.5]).unwrap()];
        let c = consistency_loss(&weak, &strong, &state, &[SampleId(1)]);
        assert_eq!(c.loss, 0.0);
        assert!(c.per_sample.is_empty());

        let weak = vec![Prediction::new(vec![0.97, 0.03]).unwrap()];
        let c = consistency_loss(&weak, &strong, &state, &[SampleId(1)]);
        assert!((c.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(c.per_sample.len(), 1);

        let agree = vec![Prediction::new(vec![1.0, 0.0]).unwrap()];
        let c = consistency_loss(&weak, &agree, &state, &[SampleId(1)]);
        assert_eq!(c.loss, 0.0);
        assert_eq!(c.per_sample[&SampleId(1)], 0.0);
    }

    #[test]
    fn fairness_examples() {
        let state = ThresholdState::new(9).unwrap();
        // nine samples, one per class, each uniform: p_bar = h_bar = uniform
        let preds: Vec<Prediction> = (0..9)
            .map(|c| {
                let mut p = vec![0.1; 9];
                p[c] = 0.2;
                Prediction::new(p).unwrap()
            })
            .collect();
        let v = fairness_loss(&state, &preds, &[true; 9]);
        assert!((v + LN9).abs() < 1e-9, "{v}");
        assert_eq!(fairness_loss(&state, &preds, &[false; 9]), 0.0);

        let skewed = vec![Prediction::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()];
        assert!(fairness_loss(&state, &skewed, &[true]).is_finite());
    }

    #[test]
    fn total_is_weighted_sum() {
        let w0 = LossWeights {
            align: 0.0,
            cons: 0.0,
            fair: 0.0,
        };
        assert_eq!(total_loss(1.5, 2.0, 3.0, 4.0, w0), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, LossWeights::default()), 10.0);
    }

    #[test]
    fn norms() {
        assert_eq!(sum_norm(&[1.0, 3.0]), vec![0.25, 0.75]);
        assert_eq!(max_norm(&[1.0, 4.0, 2.0]), vec![0.25, 1.0, 0.5]);
    }
}
