use rand::Rng;

use crate::types::VideoTensor;

/// Number of discrete magnitude levels.
const LEVELS: u32 = 10;

pub const OP_COUNT: usize = 14;

/// One RandAugment operation with its sampled magnitude.
///
/// `magnitude` is in `1..=10`; `negate` flips the direction of signed ops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RandOp {
    Identity,
    AutoContrast,
    Equalize,
    Rotate { magnitude: u32, negate: bool },
    Solarize { magnitude: u32 },
    Color { magnitude: u32, negate: bool },
    Posterize { magnitude: u32 },
    Contrast { magnitude: u32, negate: bool },
    Brightness { magnitude: u32, negate: bool },
    Sharpness { magnitude: u32, negate: bool },
    ShearX { magnitude: u32, negate: bool },
    ShearY { magnitude: u32, negate: bool },
    TranslateX { magnitude: u32, negate: bool },
    TranslateY { magnitude: u32, negate: bool },
}

impl RandOp {
    /// Draws an op uniformly from the 14 candidates with a uniform magnitude.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kind = rng.random_range(0..OP_COUNT);
        let magnitude = rng.random_range(1..=LEVELS);
        let negate = rng.random_bool(0.5);
        Self::from_parts(kind, magnitude, negate)
    }

    pub fn from_parts(kind: usize, magnitude: u32, negate: bool) -> Self {
        let magnitude = magnitude.clamp(1, LEVELS);
        match kind {
            0 => RandOp::Identity,
            1 => RandOp::AutoContrast,
            2 => RandOp::Equalize,
            3 => RandOp::Rotate { magnitude, negate },
            4 => RandOp::Solarize { magnitude },
            5 => RandOp::Color { magnitude, negate },
            6 => RandOp::Posterize { magnitude },
            7 => RandOp::Contrast { magnitude, negate },
            8 => RandOp::Brightness { magnitude, negate },
            9 => RandOp::Sharpness { magnitude, negate },
            10 => RandOp::ShearX { magnitude, negate },
            11 => RandOp::ShearY { magnitude, negate },
            12 => RandOp::TranslateX { magnitude, negate },
            13 => RandOp::TranslateY { magnitude, negate },
            _ => panic!("op kind {kind} out of range"),
        }
    }
}

fn level(magnitude: u32) -> f32 {
    magnitude as f32 / LEVELS as f32
}

fn signed(magnitude: u32, negate: bool, max: f32) -> f32 {
    let v = level(magnitude) * max;
    if negate {
        -v
    } else {
        v
    }
}

/// Applies `n_ops` randomly drawn ops. Op choice and magnitude are shared by
/// all frames of the clip.
pub fn strong_augment<R: Rng + ?Sized>(v: &VideoTensor, rng: &mut R) -> VideoTensor {
    strong_augment_with(v, 2, rng)
}

pub fn strong_augment_with<R: Rng + ?Sized>(
    v: &VideoTensor,
    n_ops: usize,
    rng: &mut R,
) -> VideoTensor {
    let ops: Vec<RandOp> = (0..n_ops).map(|_| RandOp::sample(rng)).collect();
    let mut out = v.clone();
    for op in ops {
        out = apply_op(&out, op);
    }
    out
}

/// Applies a single op to every frame; output is clamped to `[0, 1]`.
pub fn apply_op(v: &VideoTensor, op: RandOp) -> VideoTensor {
    if op == RandOp::Identity {
        return v.clone();
    }
    let [c, t, h, w] = v.shape();
    let plane = h * w;
    let mut data = v.data().to_vec();
    let mut frame = vec![0.0f32; c * plane];
    for ti in 0..t {
        for ci in 0..c {
            let start = v.index(ci, ti, 0, 0);
            frame[ci * plane..(ci + 1) * plane].copy_from_slice(&data[start..start + plane]);
        }
        let mut result = apply_frame(&frame, c, h, w, op);
        for x in &mut result {
            *x = x.clamp(0.0, 1.0);
        }
        for ci in 0..c {
            let start = v.index(ci, ti, 0, 0);
            data[start..start + plane].copy_from_slice(&result[ci * plane..(ci + 1) * plane]);
        }
    }
    VideoTensor::from_raw(v.shape(), data)
}

/// `frame` holds `c` planes of `h * w` pixels.
fn apply_frame(frame: &[f32], c: usize, h: usize, w: usize, op: RandOp) -> Vec<f32> {
    let plane = h * w;
    match op {
        RandOp::Identity => frame.to_vec(),
        RandOp::AutoContrast => {
            let mut out = frame.to_vec();
            for p in out.chunks_exact_mut(plane) {
                let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    let scale = 1.0 / (hi - lo);
                    p.iter_mut().for_each(|x| *x = (*x - lo) * scale);
                }
            }
            out
        }
        RandOp::Equalize => {
            let mut out = frame.to_vec();
            for p in out.chunks_exact_mut(plane) {
                equalize_plane(p);
            }
            out
        }
        RandOp::Solarize { magnitude } => {
            let threshold = 1.0 - level(magnitude);
            frame
                .iter()
                .map(|&x| if x >= threshold { 1.0 - x } else { x })
                .collect()
        }
        RandOp::Posterize { magnitude } => {
            let bits = 8 - (4.0 * level(magnitude)).round() as u32;
            let mask = (0xffu32 << (8 - bits)) & 0xff;
            frame
                .iter()
                .map(|&x| (((x * 255.0).round() as u32) & mask) as f32 / 255.0)
                .collect()
        }
        RandOp::Color { magnitude, negate } => {
            let factor = 1.0 + signed(magnitude, negate, 0.9);
            let gray = grayscale(frame, c, plane);
            blend_planes(frame, &gray, factor, plane)
        }
        RandOp::Contrast { magnitude, negate } => {
            let factor = 1.0 + signed(magnitude, negate, 0.9);
            let gray = grayscale(frame, c, plane);
            let mean = gray.iter().sum::<f32>() / plane as f32;
            frame.iter().map(|&x| mean + factor * (x - mean)).collect()
        }
        RandOp::Brightness { magnitude, negate } => {
            let factor = 1.0 + signed(magnitude, negate, 0.9);
            frame.iter().map(|&x| x * factor).collect()
        }
        RandOp::Sharpness { magnitude, negate } => {
            let factor = 1.0 + signed(magnitude, negate, 0.9);
            let mut out = Vec::with_capacity(frame.len());
            for p in frame.chunks_exact(plane) {
                let smooth = smooth_plane(p, h, w);
                out.extend(p.iter().zip(&smooth).map(|(&x, &s)| s + factor * (x - s)));
            }
            out
        }
        RandOp::Rotate { magnitude, negate } => {
            let theta = signed(magnitude, negate, 30.0).to_radians();
            let (sin, cos) = theta.sin_cos();
            let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
            warp(frame, c, h, w, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
        }
        RandOp::ShearX { magnitude, negate } => {
            let s = signed(magnitude, negate, 0.3);
            let cy = (h as f32 - 1.0) / 2.0;
            warp(frame, c, h, w, |y, x| (y, x + s * (y - cy)))
        }
        RandOp::ShearY { magnitude, negate } => {
            let s = signed(magnitude, negate, 0.3);
            let cx = (w as f32 - 1.0) / 2.0;
            warp(frame, c, h, w, |y, x| (y + s * (x - cx), x))
        }
        RandOp::TranslateX { magnitude, negate } => {
            let d = signed(magnitude, negate, 0.3 * w as f32);
            warp(frame, c, h, w, |y, x| (y, x - d))
        }
        RandOp::TranslateY { magnitude, negate } => {
            let d = signed(magnitude, negate, 0.3 * h as f32);
            warp(frame, c, h, w, |y, x| (y - d, x))
        }
    }
}

fn grayscale(frame: &[f32], c: usize, plane: usize) -> Vec<f32> {
    let planes: Vec<&[f32]> = frame.chunks_exact(plane).collect();
    (0..plane)
        .map(|i| {
            if c == 3 {
                0.299 * planes[0][i] + 0.587 * planes[1][i] + 0.114 * planes[2][i]
            } else {
                planes.iter().map(|p| p[i]).sum::<f32>() / c as f32
            }
        })
        .collect()
}

fn blend_planes(frame: &[f32], base: &[f32], factor: f32, plane: usize) -> Vec<f32> {
    frame
        .chunks_exact(plane)
        .flat_map(|p| p.iter().zip(base).map(move |(&x, &g)| g + factor * (x - g)))
        .collect()
}

fn equalize_plane(p: &mut [f32]) {
    let mut hist = [0usize; 256];
    let q: Vec<usize> = p
        .iter()
        .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as usize)
        .collect();
    for &v in &q {
        hist[v] += 1;
    }
    let n = q.len();
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, &count) in hist.iter().enumerate() {
        acc += count;
        cdf[i] = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
    if n == cdf_min {
        return;
    }
    let denom = (n - cdf_min) as f32;
    for (x, &v) in p.iter_mut().zip(&q) {
        *x = cdf[v].saturating_sub(cdf_min) as f32 / denom;
    }
}

/// 3x3 smoothing used by the sharpness op; the border is left untouched.
fn smooth_plane(p: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = p.to_vec();
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let weight = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                    acc += weight * p[(y + dy - 1) * w + (x + dx - 1)];
                }
            }
            out[y * w + x] = acc / 13.0;
        }
    }
    out
}

/// Inverse-mapped bilinear warp; samples outside the frame read as 0.
fn warp<F>(frame: &[f32], c: usize, h: usize, w: usize, src: F) -> Vec<f32>
where
    F: Fn(f32, f32) -> (f32, f32),
{
    let plane = h * w;
    let mut out = vec![0.0f32; frame.len()];
    let fetch = |p: &[f32], y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            p[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f32, x as f32);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ci in 0..c {
                let p = &frame[ci * plane..(ci + 1) * plane];
                let top = fetch(p, y0, x0) * (1.0 - fx) + fetch(p, y0, x0 + 1) * fx;
                let bottom = fetch(p, y0 + 1, x0) * (1.0 - fx) + fetch(p, y0 + 1, x0 + 1) * fx;
                out[ci * plane + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_video() -> VideoTensor {
        let shape = [3, 4, 12, 10];
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        VideoTensor::new(shape, data).unwrap()
    }

    #[test]
    fn every_op_preserves_shape_and_range() {
        let v = sample_video();
        for kind in 0..OP_COUNT {
            for magnitude in [1, 5, 10] {
                for negate in [false, true] {
                    let out = apply_op(&v, RandOp::from_parts(kind, magnitude, negate));
                    assert_eq!(out.shape(), v.shape());
                    assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
                }
            }
        }
    }

    #[test]
    fn identity_op_is_bit_exact() {
        let v = sample_video();
        let out = apply_op(&apply_op(&v, RandOp::Identity), RandOp::Identity);
        assert_eq!(out, v);
    }

    #[test]
    fn strong_augment_is_deterministic() {
        let v = sample_video();
        let a = strong_augment(&v, &mut ChaCha8Rng::seed_from_u64(11));
        let b = strong_augment(&v, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ops_are_shared_across_frames() {
        // identical frames stay identical after any op
        let frame: Vec<f32> = (0..3 * 8 * 8).map(|i| ((i * 13) % 29) as f32 / 28.0).collect();
        let mut data = vec![0.0; 3 * 5 * 64];
        for c in 0..3 {
            for t in 0..5 {
                data[(c * 5 + t) * 64..(c * 5 + t + 1) * 64]
                    .copy_from_slice(&frame[c * 64..(c + 1) * 64]);
            }
        }
        let v = VideoTensor::new([3, 5, 8, 8], data).unwrap();
        for seed in 0..10 {
            let out = strong_augment(&v, &mut ChaCha8Rng::seed_from_u64(seed));
            for c in 0..3 {
                let first = &out.data()[c * 5 * 64..c * 5 * 64 + 64];
                for t in 1..5 {
                    let start = (c * 5 + t) * 64;
                    assert_eq!(&out.data()[start..start + 64], first);
                }
            }
        }
    }

    #[test]
    fn translate_moves_content() {
        let mut data = vec![0.0; 16];
        data[5] = 1.0; // (1, 1) in a 4x4 frame
        let v = VideoTensor::new([1, 1, 4, 4], data).unwrap();
        // 0.3 * 4 * 10/10 = 1.2 pixels right
        let out = apply_op(&v, RandOp::TranslateX { magnitude: 10, negate: false });
        assert!(out.at(0, 0, 1, 2) > out.at(0, 0, 1, 1));
    }

    #[test]
    fn solarize_and_posterize_follow_their_definitions() {
        let v = VideoTensor::new([1, 1, 1, 3], vec![0.1, 0.6, 0.95]).unwrap();
        let s = apply_op(&v, RandOp::Solarize { magnitude: 5 });
        assert_eq!(s.data(), &[0.1, 1.0 - 0.6f32, 1.0 - 0.95f32]);
        let p = apply_op(&v, RandOp::Posterize { magnitude: 10 });
        // 4 bits kept
        for (&x, &y) in v.data().iter().zip(p.data()) {
            let q = ((x * 255.0).round() as u32) & 0xf0;
            assert_eq!(y, q as f32 / 255.0);
        }
    }
}
