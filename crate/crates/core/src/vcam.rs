//! Cross-set augmentation: convex mixing of a labeled (or confidently
//! pseudo-labeled) clip with an unlabeled clip.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::types::{
    onehot, LabeledSample, Prediction, PseudoLabeledSample, SampleId, UnlabeledSample,
    VideoTensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Ground-truth labeled sample.
    Labeled,
    /// Unlabeled sample admitted with a confident prediction.
    Promoted,
}

#[derive(Clone, Debug)]
pub struct LabeledEntry {
    pub id: SampleId,
    pub video: Arc<VideoTensor>,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug)]
pub struct UnlabeledEntry {
    pub id: SampleId,
    pub video: Arc<VideoTensor>,
    /// Argmax of the latest weak-view prediction.
    pub pseudo_label: usize,
}

/// Serializable form of the queues; videos are re-attached from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub labeled: Vec<(SampleId, usize, Origin)>,
    pub unlabeled: Vec<(SampleId, usize)>,
}

/// The labeled queue `Q_L` and the unlabeled queue `Q_U`.
#[derive(Clone, Debug, Default)]
pub struct AugmentationQueues {
    labeled: Vec<LabeledEntry>,
    unlabeled: Vec<UnlabeledEntry>,
    promoted_at: BTreeMap<SampleId, usize>,
    unlabeled_at: BTreeMap<SampleId, usize>,
}

impl AugmentationQueues {
    /// Seeds `Q_L` with every ground-truth labeled sample.
    pub fn new(labeled: &[LabeledSample]) -> Self {
        Self {
            labeled: labeled
                .iter()
                .map(|s| LabeledEntry {
                    id: s.id,
                    video: Arc::clone(&s.video),
                    label: s.label,
                    origin: Origin::Labeled,
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn labeled(&self) -> &[LabeledEntry] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[UnlabeledEntry] {
        &self.unlabeled
    }

    pub fn promoted_count(&self) -> usize {
        self.promoted_at.len()
    }

    /// Registers `u` in `Q_U` with its current pseudo-label and, when the
    /// prediction is confident enough, admits it into `Q_L`. A later promotion
    /// of the same sample replaces the earlier one. Returns whether `u` was
    /// promoted.
    pub fn promote(&mut self, u: &UnlabeledSample, pred: &Prediction, tau: f64) -> bool {
        let label = pred.argmax();
        match self.unlabeled_at.get(&u.id) {
            Some(&i) => self.unlabeled[i].pseudo_label = label,
            None => {
                self.unlabeled_at.insert(u.id, self.unlabeled.len());
                self.unlabeled.push(UnlabeledEntry {
                    id: u.id,
                    video: Arc::clone(&u.video),
                    pseudo_label: label,
                });
            }
        }
        if pred.max() <= tau {
            return false;
        }
        let entry = LabeledEntry {
            id: u.id,
            video: Arc::clone(&u.video),
            label,
            origin: Origin::Promoted,
        };
        match self.promoted_at.get(&u.id) {
            Some(&i) => self.labeled[i] = entry,
            None => {
                self.promoted_at.insert(u.id, self.labeled.len());
                self.labeled.push(entry);
            }
        }
        true
    }

    /// Shuffles both queues, pairs entries (cycling the shorter queue) and
    /// mixes `n` pairs with independent coefficients. Returns `None` when
    /// either queue is empty.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        n: usize,
        alpha: f64,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Option<Vec<PseudoLabeledSample>>> {
        if self.labeled.is_empty() || self.unlabeled.is_empty() {
            return Ok(None);
        }
        let mut l_order: Vec<usize> = (0..self.labeled.len()).collect();
        let mut u_order: Vec<usize> = (0..self.unlabeled.len()).collect();
        l_order.shuffle(rng);
        u_order.shuffle(rng);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let l = &self.labeled[l_order[i % l_order.len()]];
            let u = &self.unlabeled[u_order[i % u_order.len()]];
            let lam = sample_lambda(alpha, rng)?;
            out.push(interpolate(
                (&l.video, l.label),
                (&u.video, u.pseudo_label),
                lam,
                num_classes,
            )?);
        }
        Ok(Some(out))
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            labeled: self
                .labeled
                .iter()
                .map(|e| (e.id, e.label, e.origin))
                .collect(),
            unlabeled: self
                .unlabeled
                .iter()
                .map(|e| (e.id, e.pseudo_label))
                .collect(),
        }
    }

    /// Rebuilds queues from a snapshot, resolving videos through `video_of`.
    pub fn restore<F>(snapshot: &QueueSnapshot, video_of: F) -> Result<Self>
    where
        F: Fn(SampleId) -> Option<Arc<VideoTensor>>,
    {
        let missing = |id: SampleId| Error::Checkpoint(format!("queue references unknown sample {id}"));
        let mut q = Self::default();
        for &(id, label, origin) in &snapshot.labeled {
            let video = video_of(id).ok_or_else(|| missing(id))?;
            if origin == Origin::Promoted {
                q.promoted_at.insert(id, q.labeled.len());
            }
            q.labeled.push(LabeledEntry {
                id,
                video,
                label,
                origin,
            });
        }
        for &(id, pseudo_label) in &snapshot.unlabeled {
            let video = video_of(id).ok_or_else(|| missing(id))?;
            q.unlabeled_at.insert(id, q.unlabeled.len());
            q.unlabeled.push(UnlabeledEntry {
                id,
                video,
                pseudo_label,
            });
        }
        Ok(q)
    }
}

/// Promotion confidence for a problem with `num_classes` classes: 0.6 for
/// binary tasks, 0.9 otherwise.
pub fn default_promotion_tau(num_classes: usize) -> f64 {
    if num_classes == 2 {
        0.6
    } else {
        0.9
    }
}

/// Draws `lam ~ Beta(alpha, alpha)` and returns `max(lam, 1 - lam)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let lam = sample_beta(alpha, rng)?;
    Ok(lam.max(1.0 - lam))
}

/// Raw symmetric Beta draw, before folding onto `[0.5, 1]`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(domain(format!("beta parameter must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| domain(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// Mixes a labeled parent `l` and an unlabeled parent `u` with weight `lam` on
/// the labeled side. Pixels are mixed in double precision and rounded once,
/// so the result stays inside the parents' envelope and the endpoints
/// reproduce a parent exactly.
pub fn interpolate(
    l: (&VideoTensor, usize),
    u: (&VideoTensor, usize),
    lam: f64,
    num_classes: usize,
) -> Result<PseudoLabeledSample> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(domain(format!("interpolation weight {lam} outside [0, 1]")));
    }
    let (lv, ll) = l;
    let (uv, ul) = u;
    lv.same_shape(uv)?;
    let data = lv
        .data()
        .iter()
        .zip(uv.data())
        .map(|(&a, &b)| (lam * a as f64 + (1.0 - lam) * b as f64) as f32)
        .collect();
    let yl = onehot(ll, num_classes)?;
    let yu = onehot(ul, num_classes)?;
    let soft_label = yl
        .iter()
        .zip(&yu)
        .map(|(a, b)| lam * a + (1.0 - lam) * b)
        .collect();
    Ok(PseudoLabeledSample {
        video: VideoTensor::from_raw(lv.shape(), data),
        soft_label,
        lambda: lam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(value: f32) -> Arc<VideoTensor> {
        Arc::new(VideoTensor::new([1, 2, 2, 2], vec![value; 8]).unwrap())
    }

    fn labeled(id: u64, label: usize) -> LabeledSample {
        LabeledSample {
            id: SampleId(id),
            video: video(0.1 * id as f32),
            label,
        }
    }

    fn unlabeled(id: u64) -> UnlabeledSample {
        UnlabeledSample {
            id: SampleId(id),
            video: video(0.05 * id as f32),
        }
    }

    fn pred(top: usize, confidence: f64) -> Prediction {
        let mut p = vec![(1.0 - confidence) / 2.0; 3];
        p[top] = confidence;
        Prediction::new(p).unwrap()
    }

    #[test]
    fn promotion_respects_tau() {
        let mut q = AugmentationQueues::new(&[labeled(1, 0)]);
        assert!(q.promote(&unlabeled(10), &pred(2, 0.95), 0.9));
        assert_eq!(q.labeled().len(), 2);
        assert_eq!(q.labeled()[1].label, 2);
        assert_eq!(q.labeled()[1].origin, Origin::Promoted);

        assert!(!q.promote(&unlabeled(11), &pred(1, 0.85), 0.9));
        assert_eq!(q.labeled().len(), 2);
        assert_eq!(q.unlabeled().len(), 2);
    }

    #[test]
    fn repeated_promotion_replaces_entry() {
        let mut q = AugmentationQueues::new(&[labeled(1, 0)]);
        q.promote(&unlabeled(10), &pred(2, 0.95), 0.9);
        q.promote(&unlabeled(10), &pred(1, 0.97), 0.9);
        assert_eq!(q.labeled().len(), 2);
        assert_eq!(q.labeled()[1].label, 1);
        assert_eq!(q.unlabeled().len(), 1);
        assert_eq!(q.unlabeled()[0].pseudo_label, 1);
    }

    #[test]
    fn lambda_is_folded_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert!(sample_lambda(0.75, &mut rng).unwrap() >= 0.5);
        }
        let a = sample_lambda(0.75, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_lambda(0.75, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_lambda(0.0, &mut rng).is_err());
        assert!(sample_lambda(-1.0, &mut rng).is_err());
    }

    #[test]
    fn raw_beta_mean_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_beta(0.75, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = VideoTensor::new([1, 1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let b = VideoTensor::new([1, 1, 1, 3], vec![0.9, 0.7, 0.0]).unwrap();
        let s = interpolate((&a, 2), (&b, 5), 1.0, 9).unwrap();
        assert_eq!(s.video, a);
        assert_eq!(s.soft_label, onehot(2, 9).unwrap());
        assert_eq!(s.disc_label(), 0.0);
        let s = interpolate((&a, 2), (&b, 5), 0.0, 9).unwrap();
        assert_eq!(s.video, b);
        assert_eq!(s.soft_label, onehot(5, 9).unwrap());
        assert_eq!(s.disc_label(), 1.0);
        let s = interpolate((&a, 2), (&b, 5), 0.6, 9).unwrap();
        assert_eq!(s.soft_label[2], 0.6);
        assert!((s.soft_label[5] - 0.4).abs() < 1e-15);
        assert!((s.disc_label() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn interpolation_rejects_shape_mismatch() {
        let a = VideoTensor::zeros([1, 1, 1, 3]).unwrap();
        let b = VideoTensor::zeros([1, 1, 3, 1]).unwrap();
        assert!(matches!(interpolate((&a, 0), (&b, 1), 0.5, 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let empty = AugmentationQueues::new(&[labeled(1, 0)]);
        assert!(empty.generate_batch(3, 0.75, 3, &mut rng).unwrap().is_none());

        let mut q = AugmentationQueues::new(&[labeled(1, 0)]);
        for id in 10..13 {
            q.promote(&unlabeled(id), &pred(1, 0.5), 0.9);
        }
        assert!(q.generate_batch(0, 0.75, 3, &mut rng).unwrap().unwrap().is_empty());
        let batch = q.generate_batch(3, 0.75, 3, &mut rng).unwrap().unwrap();
        assert_eq!(batch.len(), 3);
        for s in &batch {
            // the single labeled entry (label 0) parents every pair
            assert_eq!(s.soft_label[0], s.lambda);
            assert_eq!(s.disc_label(), 1.0 - s.lambda);
            assert!((s.soft_label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut q = AugmentationQueues::new(&[labeled(1, 0), labeled(2, 1)]);
        q.promote(&unlabeled(10), &pred(2, 0.95), 0.9);
        q.promote(&unlabeled(11), &pred(0, 0.5), 0.9);
        let snap = q.snapshot();
        let r = AugmentationQueues::restore(&snap, |id| Some(video(id.0 as f32 / 100.0))).unwrap();
        assert_eq!(r.snapshot(), snap);
        assert_eq!(r.promoted_count(), 1);
        assert!(AugmentationQueues::restore(&snap, |_| None).is_err());
    }
}
