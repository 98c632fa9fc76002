//! Synthetic moving-square clips.
//!
//! Class `c` fixes a vertical velocity (still, down, up for `c % 3`) and a
//! horizontal speed level `c / 3`. The horizontal direction is random per
//! clip, so a horizontal flip never changes the class.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_tensor, Dataset, DatasetItem, DatasetManifest, ManifestEntry, Split};
use crate::error::{domain, Result};
use crate::types::{SampleId, VideoTensor};

/// Generator settings. `per_class` clips per class are drawn for each of the
/// train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Std of the per-pixel background noise.
    pub noise: f64,
    /// Square side as a fraction of the shorter frame edge.
    pub side_frac: f64,
    /// Fraction of the free vertical room covered by vertical motion.
    pub vertical_reach: f64,
    /// Fraction of the free horizontal room covered at the top speed.
    pub horizontal_reach: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            frames,
            height,
            width,
            seed,
            noise: 0.08,
            side_frac: 0.5,
            vertical_reach: 0.6,
            horizontal_reach: 0.9,
        }
    }

    fn side(&self) -> usize {
        ((self.height.min(self.width) as f64 * self.side_frac).round() as usize).clamp(1, self.height.min(self.width))
    }

    /// Per-frame velocity `(vy, |vx|)` of class `c`.
    pub fn velocity(&self, c: usize) -> (f64, f64) {
        let steps = self.frames.saturating_sub(1).max(1) as f64;
        let s = self.side() as f64;
        let vy_max = self.vertical_reach * (self.height as f64 - s - 1.0).max(0.0) / steps;
        let vx_max = self.horizontal_reach * (self.width as f64 - s - 1.0).max(0.0) / steps;
        let vy = match c % 3 {
            0 => 0.0,
            1 => vy_max,
            _ => -vy_max,
        };
        let levels = self.classes.div_ceil(3);
        let vx = if levels > 1 {
            vx_max * (c / 3) as f64 / (levels - 1) as f64
        } else {
            0.0
        };
        (vy, vx)
    }

    fn render<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<VideoTensor> {
        let (t, h, w) = (self.frames, self.height, self.width);
        let s = self.side();
        let (vy, speed) = self.velocity(class);
        let vx = if rng.random_bool(0.5) { speed } else { -speed };
        let steps = t.saturating_sub(1) as f64;
        let start = |v: f64, extent: usize, rng: &mut R| -> f64 {
            let travel = v.abs() * steps;
            let room = (extent as f64 - s as f64 - travel).max(0.0);
            let lo = if v < 0.0 { travel } else { 0.0 };
            lo + rng.random::<f64>() * room
        };
        let y0 = start(vy, h, rng);
        let x0 = start(vx, w, rng);
        let background = rng.random_range(0.1..0.3);
        let brightness = rng.random_range(0.8..1.0);
        let noise = Normal::new(0.0, self.noise).map_err(|e| domain(e.to_string()))?;

        let plane = h * w;
        let mut data = vec![0.0f32; 3 * t * plane];
        for f in 0..t {
            let top = (y0 + vy * f as f64).round().clamp(0.0, (h - s) as f64) as usize;
            let left = (x0 + vx * f as f64).round().clamp(0.0, (w - s) as f64) as usize;
            for c in 0..3 {
                let frame = &mut data[(c * t + f) * plane..(c * t + f + 1) * plane];
                for (i, px) in frame.iter_mut().enumerate() {
                    let (y, x) = (i / w, i % w);
                    let inside = y >= top && y < top + s && x >= left && x < left + s;
                    let base = if inside { brightness } else { background };
                    *px = (base + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        VideoTensor::new([3, t, h, w], data)
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes == 0 || self.per_class == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(domain("synthetic dataset parameters must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut items = Vec::with_capacity(2 * self.classes * self.per_class);
        for split in [Split::Train, Split::Test] {
            for class in 0..self.classes {
                for _ in 0..self.per_class {
                    let video = self.render(class, &mut rng)?;
                    items.push(DatasetItem {
                        id: SampleId(items.len() as u64),
                        video: Arc::new(video),
                        label: class,
                        split,
                    });
                }
            }
        }
        let digits = (self.classes - 1).max(1).to_string().len();
        let classes = (0..self.classes).map(|c| format!("class_{c:0digits$}")).collect();
        Ok(Dataset { classes, items })
    }
}

/// `per_class` train and `per_class` test clips for each of `classes`
/// classes with the default difficulty.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    SyntheticSpec::new(classes, per_class, frames, height, width, seed).generate()
}

/// Stores every clip of `ds` as a tensor file under `dir/clips` and writes
/// `dir/manifest.tsv`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let clips = dir.join("clips");
    fs::create_dir_all(&clips)?;
    let mut entries = Vec::with_capacity(ds.items.len());
    for item in &ds.items {
        let path = clips.join(format!("{:06}.bin", item.id.0));
        let v = &item.video;
        write_tensor(&path, &v.shape(), v.data())?;
        entries.push(ManifestEntry {
            path,
            class: ds.classes[item.label].clone(),
            frames: v.frames(),
            split: item.split,
        });
    }
    let manifest = DatasetManifest::new(entries);
    let file = fs::File::create(dir.join("manifest.tsv"))?;
    manifest.write(std::io::BufWriter::new(file), dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_ranges_and_determinism() {
        let a = generate_synthetic(9, 2, 8, 32, 32, 3).unwrap();
        assert_eq!(a.items.len(), 36);
        for item in &a.items {
            assert_eq!(item.video.shape(), [3, 8, 32, 32]);
            assert!(item.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let b = generate_synthetic(9, 2, 8, 32, 32, 3).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.video, y.video);
            assert_eq!((x.id, x.label, x.split), (y.id, y.label, y.split));
        }
        let c = generate_synthetic(9, 2, 8, 32, 32, 4).unwrap();
        assert_ne!(a.items[0].video, c.items[0].video);
    }

    #[test]
    fn class_velocities_are_distinct_and_paths_fit() {
        let spec = SyntheticSpec::new(9, 1, 8, 32, 32, 0);
        let mut seen = Vec::new();
        for c in 0..9 {
            let v = spec.velocity(c);
            assert!(!seen.contains(&v), "class {c} repeats {v:?}");
            seen.push(v);
            let s = spec.side() as f64;
            assert!(v.0.abs() * 7.0 + s <= 32.0 && v.1 * 7.0 + s <= 32.0);
        }
    }

    #[test]
    fn square_moves_with_the_class_velocity() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::new(9, 1, 8, 32, 32, 5)
        };
        let ds = spec.generate().unwrap();
        for item in ds.items.iter().filter(|i| i.split == Split::Train) {
            let v = &item.video;
            let centroid = |f: usize| {
                let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                for y in 0..32 {
                    for x in 0..32 {
                        if v.at(0, f, y, x) >= 0.8 {
                            sy += y as f64;
                            sx += x as f64;
                            n += 1.0;
                        }
                    }
                }
                (sy / n, sx / n)
            };
            let (y0, x0) = centroid(0);
            let (y1, x1) = centroid(7);
            let (vy, vx) = spec.velocity(item.label);
            assert!(((y1 - y0) - 7.0 * vy).abs() <= 1.0);
            assert!(((x1 - x0).abs() - 7.0 * vx).abs() <= 1.0);
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(3, 1, 4, 8, 8, 1).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let m = DatasetManifest::read(&dir.path().join("manifest.tsv")).unwrap();
        let back = Dataset::load(&m, 4, 8, 8).unwrap();
        assert_eq!(back.classes, ds.classes);
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(a.video, b.video);
            assert_eq!((a.label, a.split), (b.label, b.split));
        }
    }
}
