//! Run configuration: geometry, optimisation, loss weights and feature toggles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Cube extent along (frames, height, width).
    pub patch: [usize; 3],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Pixels enter the cube projection as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: [8, 4, 4],
            embed_dim: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

/// Everything that determines a training run besides the data itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub model: ModelConfig,

    /// Base learning rate.
    pub lr: f64,
    /// Total number of optimisation steps.
    pub total_steps: u64,
    pub momentum: f64,
    pub weight_decay: f64,

    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub vcam_batch: usize,

    pub w_align: f64,
    pub w_cons: f64,
    /// Kept small: with a few samples per batch most classes are missing from
    /// the argmax histogram and the floored ratio dominates the loss.
    pub w_fair: f64,
    /// Weight of the classification term inside the alignment loss.
    pub rho: f64,

    /// Confidence needed to promote an unlabeled clip into the labeled queue.
    pub vcam_tau: f64,
    /// Beta(alpha, alpha) parameter for interpolation coefficients.
    pub beta_alpha: f64,

    pub noise_sigma: f64,
    pub mask_frac: [f64; 2],
    /// One mask rectangle per frame when true, one shared rectangle otherwise.
    pub mask_per_frame: bool,
    pub randaug_ops: usize,

    pub ema_momentum: f64,
    pub sab_min_history: usize,
    pub sab_bins: usize,
    /// Run OTSU over the pooled history of all samples instead of per sample.
    pub sab_pooled: bool,

    pub use_consistency: bool,
    pub use_sat: bool,
    pub fixed_threshold: f64,
    pub use_fairness: bool,
    pub use_sab: bool,
    pub use_vcam: bool,

    pub seed: u64,
    pub eval_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_classes: 9,
            channels: 3,
            frames: 8,
            height: 32,
            width: 32,
            model: ModelConfig::default(),
            lr: 0.03,
            total_steps: 2000,
            momentum: 0.9,
            weight_decay: 5e-4,
            labeled_batch: 4,
            unlabeled_batch: 4,
            vcam_batch: 4,
            w_align: 1.0,
            w_cons: 1.0,
            w_fair: 0.01,
            rho: 1.0,
            vcam_tau: 0.9,
            beta_alpha: 0.75,
            noise_sigma: 0.1,
            mask_frac: [0.1, 0.3],
            mask_per_frame: true,
            randaug_ops: 2,
            ema_momentum: 0.999,
            sab_min_history: 2,
            sab_bins: 256,
            sab_pooled: false,
            use_consistency: true,
            use_sat: true,
            fixed_threshold: 0.95,
            use_fairness: true,
            use_sab: true,
            use_vcam: true,
            seed: 0,
            eval_interval: 100,
        }
    }
}

/// Named rows of the component ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    /// Consistency regularisation with a fixed 0.95 threshold.
    CrFixed,
    /// Consistency regularisation with the self-adaptive threshold.
    CrSat,
    /// Adds the class fairness loss.
    CrSatFair,
    /// Adds super augmentation.
    CrSatFairSab,
    /// Adds cross-set augmentation: the complete method.
    Full,
    /// Labeled data only.
    Supervised,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::CrFixed,
        Arm::CrSat,
        Arm::CrSatFair,
        Arm::CrSatFairSab,
        Arm::Full,
        Arm::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::CrFixed => "CR+FT",
            Arm::CrSat => "CR+SAT",
            Arm::CrSatFair => "CR+SAT+FL",
            Arm::CrSatFairSab => "CR+SAT+FL+SAB",
            Arm::Full => "CR+SAT+FL+SAB+VCAM",
            Arm::Supervised => "supervised",
        }
    }

    /// Sets the feature toggles of `cfg` to this arm.
    pub fn apply(self, cfg: &mut RunConfig) {
        let (cons, sat, fair, sab, vcam) = match self {
            Arm::CrFixed => (true, false, false, false, false),
            Arm::CrSat => (true, true, false, false, false),
            Arm::CrSatFair => (true, true, true, false, false),
            Arm::CrSatFairSab => (true, true, true, true, false),
            Arm::Full => (true, true, true, true, true),
            Arm::Supervised => (false, false, false, false, false),
        };
        cfg.use_consistency = cons;
        cfg.use_sat = sat;
        cfg.use_fairness = fair;
        cfg.use_sab = sab;
        cfg.use_vcam = vcam;
        if self == Arm::CrFixed {
            cfg.fixed_threshold = 0.95;
        }
    }
}

impl RunConfig {
    pub fn video_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.video_shape().iter().any(|&d| d == 0) {
            return bad("video dimensions must be >= 1".into());
        }
        let [tp, hp, wp] = self.model.patch;
        if tp == 0 || hp == 0 || wp == 0 {
            return bad("patch extents must be >= 1".into());
        }
        if self.frames % tp != 0 || self.height % hp != 0 || self.width % wp != 0 {
            return bad(format!(
                "patch {:?} does not divide video (T={}, H={}, W={})",
                self.model.patch, self.frames, self.height, self.width
            ));
        }
        if self.model.embed_dim == 0
            || self.model.heads == 0
            || self.model.embed_dim % self.model.heads != 0
        {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.model.embed_dim, self.model.heads
            ));
        }
        if !(self.model.input_std > 0.0 && self.model.input_std.is_finite() && self.model.input_mean.is_finite()) {
            return bad(format!(
                "input normalisation needs a finite mean and a positive std, got {} / {}",
                self.model.input_mean, self.model.input_std
            ));
        }
        if self.model.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.total_steps < 1 {
            return bad("total_steps must be >= 1".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("w_align", self.w_align),
            ("w_cons", self.w_cons),
            ("w_fair", self.w_fair),
            ("rho", self.rho),
            ("weight_decay", self.weight_decay),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.vcam_tau > 0.0 && self.vcam_tau < 1.0) {
            return bad(format!("vcam_tau must be in (0, 1), got {}", self.vcam_tau));
        }
        if !(self.fixed_threshold > 0.0 && self.fixed_threshold <= 1.0) {
            return bad(format!(
                "fixed_threshold must be in (0, 1], got {}",
                self.fixed_threshold
            ));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum <= 1.0) {
            return bad(format!(
                "ema_momentum must be in (0, 1], got {}",
                self.ema_momentum
            ));
        }
        if !(self.beta_alpha > 0.0 && self.beta_alpha.is_finite()) {
            return bad(format!("beta_alpha must be > 0, got {}", self.beta_alpha));
        }
        let [lo, hi] = self.mask_frac;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("mask_frac [{lo}, {hi}] is not a sub-range of [0, 1]"));
        }
        if self.labeled_batch == 0 {
            return bad("labeled_batch must be >= 1".into());
        }
        if self.sab_bins < 2 {
            return bad("sab_bins must be >= 2".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut c = RunConfig::default();
        c.vcam_tau = 1.0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.w_fair = -1.0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.total_steps = 0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.frames = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn arms_toggle_features() {
        let mut c = RunConfig::default();
        Arm::CrFixed.apply(&mut c);
        assert!(!c.use_sat && !c.use_fairness && !c.use_sab && !c.use_vcam);
        assert_eq!(c.fixed_threshold, 0.95);
        Arm::Full.apply(&mut c);
        assert!(c.use_sat && c.use_fairness && c.use_sab && c.use_vcam);
    }
}
