//! Video augmentations: weak (flip), strong (RandAugment) and the super
//! augmentation applied to strong views of well-learned samples.
//!
//! Every function is a pure function of its input and the random stream it is
//! handed. Randomness is drawn per video, so a clip's frames share one
//! decision unless stated otherwise.

mod randaugment;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use randaugment::{apply_op, strong_augment, strong_augment_with, RandOp, OP_COUNT};

use crate::error::{domain, Result};
use crate::types::VideoTensor;

/// Weak and strong views of the same clip.
#[derive(Clone, Debug)]
pub struct AugPair {
    pub weak: VideoTensor,
    pub strong: VideoTensor,
}

/// Mirrors every frame left to right.
pub fn hflip(v: &VideoTensor) -> VideoTensor {
    let w = v.width();
    let mut data = v.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    VideoTensor::from_raw(v.shape(), data)
}

/// Flips the whole clip horizontally with probability 0.5.
pub fn weak_augment<R: Rng + ?Sized>(v: &VideoTensor, rng: &mut R) -> VideoTensor {
    if rng.random_bool(0.5) {
        hflip(v)
    } else {
        v.clone()
    }
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`, then
/// clamps to `[0, 1]`.
pub fn gaussian_noise<R: Rng + ?Sized>(
    v: &VideoTensor,
    sigma: f64,
    rng: &mut R,
) -> Result<VideoTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(domain(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0f32, sigma as f32).map_err(|e| domain(e.to_string()))?;
    let data = v
        .data()
        .iter()
        .map(|&x| (x + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Ok(VideoTensor::from_raw(v.shape(), data))
}

/// Placement of the occluding rectangle across frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLayout {
    /// An independent rectangle in every frame.
    PerFrame,
    /// One rectangle shared by all frames.
    Shared,
}

/// Zeroes one axis-aligned rectangle per frame covering a fraction of the
/// frame drawn uniformly from `frac_range`.
pub fn random_mask<R: Rng + ?Sized>(
    v: &VideoTensor,
    frac_range: [f64; 2],
    rng: &mut R,
) -> Result<VideoTensor> {
    random_mask_with(v, frac_range, MaskLayout::PerFrame, rng)
}

pub fn random_mask_with<R: Rng + ?Sized>(
    v: &VideoTensor,
    frac_range: [f64; 2],
    layout: MaskLayout,
    rng: &mut R,
) -> Result<VideoTensor> {
    let [lo, hi] = frac_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(domain(format!(
            "mask fraction range [{lo}, {hi}] is not within [0, 1]"
        )));
    }
    if hi == 0.0 {
        return Ok(v.clone());
    }
    let [c, t, h, w] = v.shape();
    let mut data = v.data().to_vec();
    let mut rect = None;
    for frame in 0..t {
        let (top, left, rh, rw) = match (layout, rect) {
            (MaskLayout::Shared, Some(r)) => r,
            _ => {
                let r = sample_rect(lo, hi, h, w, rng);
                rect = Some(r);
                r
            }
        };
        for ch in 0..c {
            for y in top..top + rh {
                let start = v.index(ch, frame, y, left);
                data[start..start + rw].fill(0.0);
            }
        }
    }
    Ok(VideoTensor::from_raw(v.shape(), data))
}

fn sample_rect<R: Rng + ?Sized>(
    lo: f64,
    hi: f64,
    h: usize,
    w: usize,
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = area.sqrt();
    let rh = ((side * h as f64).round() as usize).min(h);
    let rw = ((side * w as f64).round() as usize).min(w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    (top, left, rh, rw)
}

/// Parameters of the super augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuperAugment {
    pub sigma: f64,
    pub mask_frac: [f64; 2],
    pub layout: MaskLayout,
}

impl Default for SuperAugment {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            mask_frac: [0.1, 0.3],
            layout: MaskLayout::PerFrame,
        }
    }
}

/// Noise first, then masking, so masked pixels are exactly zero.
pub fn super_augment<R: Rng + ?Sized>(
    v_strong: &VideoTensor,
    sigma: f64,
    frac_range: [f64; 2],
    rng: &mut R,
) -> Result<VideoTensor> {
    super_augment_with(
        v_strong,
        &SuperAugment {
            sigma,
            mask_frac: frac_range,
            layout: MaskLayout::PerFrame,
        },
        rng,
    )
}

pub fn super_augment_with<R: Rng + ?Sized>(
    v_strong: &VideoTensor,
    params: &SuperAugment,
    rng: &mut R,
) -> Result<VideoTensor> {
    let noisy = gaussian_noise(v_strong, params.sigma, rng)?;
    random_mask_with(&noisy, params.mask_frac, params.layout, rng)
}
