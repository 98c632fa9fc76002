//! Domain types shared by every stage of the pipeline.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Tolerance for a probability vector to count as lying on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Stable identifier of a sample within a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense video clip laid out as `(channels, frames, height, width)`, row-major,
/// with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl VideoTensor {
    /// Builds a tensor, validating dimensions and pixel range.
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(domain(format!("video dims must be >= 1, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(domain(format!(
                "video data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values that are clamped into `[0, 1]`.
    pub fn from_clamped(shape: [usize; 4], mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            if !v.is_finite() {
                return Err(domain("non-finite pixel value"));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    /// Internal constructor for data already known to satisfy the invariants.
    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        let [_, tt, hh, ww] = self.shape;
        ((c * tt + t) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, t, h, w)]
    }

    pub fn same_shape(&self, other: &VideoTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape.to_vec(),
                actual: other.shape.to_vec(),
            });
        }
        Ok(())
    }
}

/// A labeled training or test clip.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: SampleId,
    pub video: Arc<VideoTensor>,
    pub label: usize,
}

/// An unlabeled clip. It deliberately carries no label field; ground truth for
/// metrics lives in a separate table owned by the data split.
#[derive(Clone, Debug)]
pub struct UnlabeledSample {
    pub id: SampleId,
    pub video: Arc<VideoTensor>,
}

/// Class-probability vector on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    probs: Vec<f64>,
}

impl Prediction {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(domain("empty prediction"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(domain("prediction entries must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(domain(format!("prediction sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax of raw scores.
    pub fn from_logits<T: Copy + Into<f64>>(logits: &[T]) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

pub(crate) fn softmax<T: Copy + Into<f64>>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&v| v.into())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v.into() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Interpolated video with soft class label, produced by cross-set mixing.
///
/// The discriminator label is always derived from `lambda`, never stored.
#[derive(Clone, Debug)]
pub struct PseudoLabeledSample {
    pub video: VideoTensor,
    pub soft_label: Vec<f64>,
    pub lambda: f64,
}

impl PseudoLabeledSample {
    /// Discriminator target: 0 marks the labeled parent, 1 the unlabeled one.
    pub fn disc_label(&self) -> f64 {
        1.0 - self.lambda
    }
}

/// One-hot encoding of `label` over `num_classes` classes.
pub fn onehot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(domain(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn onehot_examples() {
        assert_eq!(
            onehot(2, 9).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(onehot(0, 2).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(onehot(9, 9), Err(Error::Domain(_))));
    }

    #[test]
    fn video_rejects_bad_input() {
        assert!(VideoTensor::new([1, 1, 1, 0], vec![]).is_err());
        assert!(VideoTensor::new([1, 1, 1, 2], vec![0.5]).is_err());
        assert!(VideoTensor::new([1, 1, 1, 1], vec![1.5]).is_err());
        assert!(VideoTensor::new([1, 1, 1, 1], vec![f32::NAN]).is_err());
        let v = VideoTensor::from_clamped([1, 1, 1, 2], vec![-0.2, 3.0]).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0]);
    }

    #[test]
    fn video_indexing_is_row_major() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| i as f32 / 200.0).collect();
        let v = VideoTensor::new([2, 3, 4, 5], data).unwrap();
        assert_eq!(v.index(1, 2, 3, 4), 119);
        assert_eq!(v.at(0, 0, 1, 0), 5.0 / 200.0);
    }

    #[test]
    fn prediction_from_logits_is_on_simplex_and_shift_invariant() {
        let a = Prediction::from_logits(&[1.0f32, 2.0, -3.0]);
        let b = Prediction::from_logits(&[101.0f32, 102.0, 97.0]);
        let sum: f64 = a.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.argmax(), 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Prediction::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(p.argmax(), 0);
        assert!(Prediction::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn disc_label_complements_lambda() {
        let s = PseudoLabeledSample {
            video: VideoTensor::zeros([1, 1, 1, 1]).unwrap(),
            soft_label: vec![0.3, 0.7],
            lambda: 0.3,
        };
        assert_eq!(s.disc_label() + s.lambda, 1.0);
    }
}
