//! The semi-supervised training loop.

mod checkpoint;
mod metrics;
mod optim;
mod schedule;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_name, load_model, CHECKPOINT_VERSION};
pub use metrics::{MetricsWriter, METRICS_COLUMNS};
pub use optim::Sgd;
pub use schedule::{lr_at, Schedule};

use crate::augment::{strong_augment_with, super_augment_with, weak_augment, AugPair, MaskLayout, SuperAugment};
use crate::config::RunConfig;
use crate::error::{domain, Error, Result};
use crate::losses::{
    alignment_loss_grad, consistency_loss_grad, fairness_loss_grad, supervised_loss_grad, total_loss, LossWeights,
};
use crate::model::{Encoder, SiavcModel, VideoModel};
use crate::sab::{LossHistoryStore, SabEvent, SabSettings};
use crate::thresholds::ThresholdState;
use crate::types::{LabeledSample, Prediction, SampleId, UnlabeledSample, VideoTensor};
use crate::vcam::AugmentationQueues;

/// Clips per forward pass during inference.
const INFER_CHUNK: usize = 32;

/// Training inputs after splitting.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    /// Withheld labels of the unlabeled clips. Read only for metrics.
    pub unlabeled_truth: BTreeMap<SampleId, usize>,
    pub test: Vec<LabeledSample>,
}

impl TrainData {
    fn check(&self, cfg: &RunConfig) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::Config("training needs at least one labeled clip".into()));
        }
        let shape = cfg.video_shape();
        let videos = self
            .labeled
            .iter()
            .map(|s| &s.video)
            .chain(self.unlabeled.iter().map(|s| &s.video))
            .chain(self.test.iter().map(|s| &s.video));
        for v in videos {
            if v.shape() != shape {
                return Err(Error::Shape {
                    expected: shape.to_vec(),
                    actual: v.shape().to_vec(),
                });
            }
        }
        for s in self.labeled.iter().chain(&self.test) {
            if s.label >= cfg.num_classes {
                return Err(domain(format!(
                    "sample {} has label {} but there are {} classes",
                    s.id, s.label, cfg.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Endless shuffled pass over `0..n`, reshuffled at every epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next_batch<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
}

/// Everything recorded for one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    /// Steps completed, counting this one.
    pub step: u64,
    pub lr: f64,
    pub l_cs: f64,
    pub l_align: f64,
    pub l_cons: f64,
    pub l_fair: f64,
    pub total: f64,
    /// Share of threshold-passing unlabeled clips whose pseudo-label is right.
    pub pseudo_acc: Option<f64>,
    /// Clips whose loss fell below their history threshold this step.
    pub sab_gates: usize,
    /// Clips promoted into the labeled queue this step.
    pub vcam_promotions: usize,
    pub eval: Option<EvalMetrics>,
}

/// Whether `label` is among the `k` most probable classes. Equal
/// probabilities rank the lower class index first.
pub fn in_top_k(probs: &[f64], label: usize, k: usize) -> bool {
    let p = probs[label];
    let rank = probs
        .iter()
        .enumerate()
        .filter(|&(c, &q)| q > p || (q == p && c < label))
        .count();
    rank < k
}

/// Predictions and pooled latents for `videos`, in order.
pub fn infer<E: Encoder>(model: &VideoModel<E>, videos: &[&VideoTensor]) -> Result<(Vec<Prediction>, Vec<Vec<f32>>)> {
    let mut preds = Vec::with_capacity(videos.len());
    let mut latents = Vec::with_capacity(videos.len());
    let d = model.embed_config().embed_dim;
    for chunk in videos.chunks(INFER_CHUNK) {
        let fwd = model.forward(chunk)?;
        preds.extend(fwd.predictions());
        latents.extend(fwd.latents.chunks_exact(d).map(<[f32]>::to_vec));
    }
    Ok((preds, latents))
}

/// Top-1 and top-5 accuracy on `test`.
pub fn evaluate<E: Encoder>(model: &VideoModel<E>, test: &[LabeledSample]) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(domain("evaluation needs a non-empty test set"));
    }
    let videos: Vec<&VideoTensor> = test.iter().map(|s| s.video.as_ref()).collect();
    let (preds, _) = infer(model, &videos)?;
    Ok(accuracy(&preds, test.iter().map(|s| s.label)))
}

pub(crate) fn accuracy(preds: &[Prediction], labels: impl Iterator<Item = usize>) -> EvalMetrics {
    let (mut h1, mut h5, mut n) = (0usize, 0usize, 0usize);
    for (p, y) in preds.iter().zip(labels) {
        h1 += in_top_k(p.probs(), y, 1) as usize;
        h5 += in_top_k(p.probs(), y, 5) as usize;
        n += 1;
    }
    EvalMetrics {
        top1: h1 as f64 / n as f64,
        top5: h5 as f64 / n as f64,
    }
}

fn super_params(cfg: &RunConfig) -> SuperAugment {
    SuperAugment {
        sigma: cfg.noise_sigma,
        mask_frac: cfg.mask_frac,
        layout: if cfg.mask_per_frame {
            MaskLayout::PerFrame
        } else {
            MaskLayout::Shared
        },
    }
}

/// Weak and strong views of an unlabeled batch. `gate[i]` asks for super
/// augmentation on top of clip `i`'s strong view and is ignored unless
/// `cfg.use_sab` is set.
pub fn unlabeled_views<R: Rng + ?Sized>(
    videos: &[&VideoTensor],
    gate: &[bool],
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<Vec<AugPair>> {
    assert_eq!(videos.len(), gate.len());
    let sa = super_params(cfg);
    videos
        .iter()
        .zip(gate)
        .map(|(v, &g)| {
            let weak = weak_augment(v, rng);
            let mut strong = strong_augment_with(v, cfg.randaug_ops, rng);
            if cfg.use_sab && g {
                strong = super_augment_with(&strong, &sa, rng)?;
            }
            Ok(AugPair { weak, strong })
        })
        .collect()
}

fn accumulate(dst: &mut [Vec<f64>], src: &[Vec<f64>], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a += w * b);
    }
}

/// Model, optimiser and all method state for one run.
pub struct Trainer {
    cfg: RunConfig,
    data: TrainData,
    model: SiavcModel,
    opt: Sgd,
    thresholds: ThresholdState,
    sab: LossHistoryStore,
    queues: AugmentationQueues,
    rng: ChaCha8Rng,
    labeled_sampler: EpochSampler,
    unlabeled_sampler: EpochSampler,
    step: u64,
    last_eval: Option<EvalMetrics>,
    best_eval: Option<(u64, EvalMetrics)>,
    sab_events: Vec<SabEvent>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        data.check(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = SiavcModel::from_config(&cfg, &mut rng)?;
        let opt = Sgd::new(cfg.momentum, cfg.weight_decay, model.layout().decay_mask());
        let thresholds = initial_thresholds(&cfg)?;
        let sab = LossHistoryStore::new(sab_settings(&cfg));
        let queues = AugmentationQueues::new(&data.labeled);
        let labeled_sampler = EpochSampler::new(data.labeled.len());
        let unlabeled_sampler = EpochSampler::new(data.unlabeled.len());
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            thresholds,
            sab,
            queues,
            rng,
            labeled_sampler,
            unlabeled_sampler,
            step: 0,
            last_eval: None,
            best_eval: None,
            sab_events: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn model(&self) -> &SiavcModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut SiavcModel {
        &mut self.model
    }

    pub fn thresholds(&self) -> &ThresholdState {
        &self.thresholds
    }

    pub fn sab(&self) -> &LossHistoryStore {
        &self.sab
    }

    pub fn sab_mut(&mut self) -> &mut LossHistoryStore {
        &mut self.sab
    }

    pub fn queues(&self) -> &AugmentationQueues {
        &self.queues
    }

    /// Every gate decision so far, for the diagnostic dump.
    pub fn sab_events(&self) -> &[SabEvent] {
        &self.sab_events
    }

    /// Steps completed.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn last_eval(&self) -> Option<EvalMetrics> {
        self.last_eval
    }

    /// Best periodic evaluation and the step it was taken at.
    pub fn best_eval(&self) -> Option<(u64, EvalMetrics)> {
        self.best_eval
    }

    /// Evaluates the current model on the test split.
    pub fn evaluate(&self) -> Result<EvalMetrics> {
        evaluate(&self.model, &self.data.test)
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<TrainMetrics> {
        if self.is_finished() {
            return Err(domain(format!("all {} steps already ran", self.cfg.total_steps)));
        }
        let cfg = self.cfg.clone();
        let g = self.step;
        let lr = lr_at(cfg.lr, g, cfg.total_steps);
        let classes = cfg.num_classes;

        let li = self.labeled_sampler.next_batch(cfg.labeled_batch, &mut self.rng);
        let ui = if cfg.use_consistency || cfg.use_vcam {
            self.unlabeled_sampler.next_batch(cfg.unlabeled_batch, &mut self.rng)
        } else {
            Vec::new()
        };
        let lab: Vec<&LabeledSample> = li.iter().map(|&i| &self.data.labeled[i]).collect();
        let unl: Vec<&UnlabeledSample> = ui.iter().map(|&i| &self.data.unlabeled[i]).collect();

        let lab_views: Vec<VideoTensor> = lab.iter().map(|s| weak_augment(&s.video, &mut self.rng)).collect();
        let gate: Vec<bool> = unl.iter().map(|u| cfg.use_sab && self.sab.take_flag(u.id)).collect();
        let raw: Vec<&VideoTensor> = unl.iter().map(|u| u.video.as_ref()).collect();
        let pairs = unlabeled_views(&raw, &gate, &cfg, &mut self.rng)?;

        let weak_preds = if pairs.is_empty() {
            Vec::new()
        } else {
            let weak: Vec<&VideoTensor> = pairs.iter().map(|p| &p.weak).collect();
            self.model.forward(&weak)?.predictions()
        };
        self.thresholds.update(&weak_preds);

        let mut promotions = 0;
        let mut mixed = Vec::new();
        if cfg.use_vcam {
            for (u, p) in unl.iter().zip(&weak_preds) {
                promotions += self.queues.promote(u, p, cfg.vcam_tau) as usize;
            }
            mixed = self
                .queues
                .generate_batch(cfg.vcam_batch, cfg.beta_alpha, classes, &mut self.rng)?
                .unwrap_or_default();
        }

        let mut refs: Vec<&VideoTensor> = lab_views.iter().collect();
        let ns = if cfg.use_consistency { pairs.len() } else { 0 };
        refs.extend(pairs[..ns].iter().map(|p| &p.strong));
        refs.extend(mixed.iter().map(|m| &m.video));
        let nl = lab.len();
        let fwd = self.model.forward(&refs)?;
        let logits = fwd.logits_f64();
        let mut d_logits = vec![vec![0.0f64; classes]; refs.len()];
        let mut d_disc = vec![0.0f64; refs.len()];

        let labels: Vec<usize> = lab.iter().map(|s| s.label).collect();
        let (l_cs, grad) = supervised_loss_grad(&labels, &logits[..nl]);
        accumulate(&mut d_logits[..nl], &grad, 1.0);

        let (mut l_cons, mut l_fair, mut pseudo_acc) = (0.0, 0.0, None);
        let mut per_sample = BTreeMap::new();
        if ns > 0 {
            let ids: Vec<SampleId> = unl.iter().map(|u| u.id).collect();
            let strong = &logits[nl..nl + ns];
            let (cons, grad) = consistency_loss_grad(&weak_preds, strong, &self.thresholds, &ids);
            l_cons = cons.loss;
            accumulate(&mut d_logits[nl..nl + ns], &grad, cfg.w_cons);
            if cfg.use_fairness {
                let (v, grad) = fairness_loss_grad(&self.thresholds, strong, &cons.mask);
                l_fair = v;
                accumulate(&mut d_logits[nl..nl + ns], &grad, cfg.w_fair);
            }
            pseudo_acc = self.pseudo_accuracy(&ids, &weak_preds, &cons.mask);
            per_sample = cons.per_sample;
        }

        let mut l_align = 0.0;
        if !mixed.is_empty() {
            let at = nl + ns;
            let disc: Vec<f64> = fwd.disc_logits[at..].iter().map(|&s| s as f64).collect();
            let (v, d_cls, d_dis) = alignment_loss_grad(&mixed, &logits[at..], &disc, cfg.rho);
            l_align = v;
            accumulate(&mut d_logits[at..], &d_cls, cfg.w_align);
            for (dst, s) in d_disc[at..].iter_mut().zip(&d_dis) {
                *dst = cfg.w_align * s;
            }
        }

        let weights = LossWeights {
            align: cfg.w_align,
            cons: cfg.w_cons,
            fair: cfg.w_fair,
        };
        let total = total_loss(l_cs, l_align, l_cons, l_fair, weights);
        if !total.is_finite() {
            let ids = lab.iter().map(|s| s.id.0).chain(unl.iter().map(|u| u.id.0)).collect();
            return Err(Error::NonFinite { step: g, ids });
        }

        let mut sab_gates = 0;
        if cfg.use_sab {
            for (&id, &loss) in &per_sample {
                let event = self.sab.observe(id, loss, g)?;
                sab_gates += event.gated as usize;
                self.sab_events.push(event);
            }
        }

        let mut grads = vec![0.0f32; self.model.layout().len()];
        let dl: Vec<f32> = d_logits.iter().flatten().map(|&v| v as f32).collect();
        let dd: Vec<f32> = d_disc.iter().map(|&v| v as f32).collect();
        let disc_grad = (!mixed.is_empty()).then_some(dd.as_slice());
        self.model.backward(&fwd, &dl, disc_grad, &mut grads);
        drop(fwd);
        self.opt.step(self.model.params_mut(), &grads, lr);
        self.step += 1;

        let eval = self.eval_if_due()?;
        Ok(TrainMetrics {
            step: self.step,
            lr,
            l_cs,
            l_align,
            l_cons,
            l_fair,
            total,
            pseudo_acc,
            sab_gates,
            vcam_promotions: promotions,
            eval,
        })
    }

    /// Runs the remaining steps, handing each step's metrics to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&TrainMetrics) -> Result<()>,
    {
        while !self.is_finished() {
            let m = self.step()?;
            if let Some(e) = m.eval {
                log::info!(
                    "step {}/{}: loss {:.4} top1 {:.4} top5 {:.4}",
                    m.step,
                    self.cfg.total_steps,
                    m.total,
                    e.top1,
                    e.top5
                );
            }
            sink(&m)?;
        }
        Ok(())
    }

    fn eval_if_due(&mut self) -> Result<Option<EvalMetrics>> {
        let due = self.cfg.eval_interval > 0 && self.step % self.cfg.eval_interval == 0;
        if self.data.test.is_empty() || !(due || self.is_finished()) {
            return Ok(None);
        }
        let e = self.evaluate()?;
        self.last_eval = Some(e);
        if self.best_eval.is_none_or(|(_, b)| e.top1 > b.top1) {
            self.best_eval = Some((self.step, e));
        }
        Ok(Some(e))
    }

    fn pseudo_accuracy(&self, ids: &[SampleId], weak: &[Prediction], mask: &[bool]) -> Option<f64> {
        let (mut right, mut seen) = (0usize, 0usize);
        for ((id, p), &m) in ids.iter().zip(weak).zip(mask) {
            if !m {
                continue;
            }
            if let Some(&y) = self.data.unlabeled_truth.get(id) {
                seen += 1;
                right += (p.argmax() == y) as usize;
            }
        }
        (seen > 0).then(|| right as f64 / seen as f64)
    }
}

fn initial_thresholds(cfg: &RunConfig) -> Result<ThresholdState> {
    let t = ThresholdState::with_momentum(cfg.num_classes, cfg.ema_momentum)?;
    Ok(if cfg.use_sat {
        t
    } else {
        t.with_fixed(cfg.fixed_threshold)
    })
}

fn sab_settings(cfg: &RunConfig) -> SabSettings {
    SabSettings {
        min_history: cfg.sab_min_history,
        bins: cfg.sab_bins,
        pooled: cfg.sab_pooled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_ranking() {
        let p = [0.1, 0.5, 0.2, 0.15, 0.05];
        assert!(in_top_k(&p, 1, 1));
        assert!(!in_top_k(&p, 3, 1));
        assert!(in_top_k(&p, 3, 5));
        // third-ranked label
        assert!(!in_top_k(&p, 3, 2));
        assert!(in_top_k(&p, 3, 3));
        // ties resolve towards the lower index
        let tie = [0.25; 4];
        assert!(in_top_k(&tie, 0, 1));
        assert!(!in_top_k(&tie, 1, 1));
        assert!(in_top_k(&tie, 1, 2));
    }

    #[test]
    fn five_classes_always_top5() {
        let preds: Vec<Prediction> = (0..5)
            .map(|i| Prediction::from_logits(&[i as f64, 0.0, 1.0, -2.0, 0.5]))
            .collect();
        let e = accuracy(&preds, 0..5);
        assert_eq!(e.top5, 1.0);
    }

    #[test]
    fn sampler_visits_everything_each_epoch() {
        let mut s = EpochSampler::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let mut seen = s.next_batch(5, &mut rng);
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
        assert!(EpochSampler::new(0).next_batch(3, &mut rng).is_empty());
    }
}
