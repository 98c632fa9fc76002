//! Dataset manifests, clip loading, label splits and the synthetic set.

mod synthetic;
mod tensor_file;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use synthetic::{generate_synthetic, write_dataset, SyntheticSpec};
pub use tensor_file::{read_tensor, write_tensor, TENSOR_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::trainer::TrainData;
use crate::types::{LabeledSample, SampleId, UnlabeledSample, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: String,
    pub frames: usize,
    pub split: Split,
}

/// Sample list with a class vocabulary. Classes are indexed in sorted
/// name order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    classes: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        let classes: BTreeSet<String> = entries.iter().map(|e| e.class.clone()).collect();
        Self {
            entries,
            classes: classes.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    /// Parses tab-separated lines `path, class, frames[, split]`. Relative
    /// paths are resolved against `base`; a missing split means `train`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::Config(format!("manifest line {}: {why}", no + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(bad("expected 3 or 4 tab-separated fields"));
            }
            let frames = cols[2].trim().parse().map_err(|_| bad("frame count is not an integer"))?;
            let split = match cols.get(3) {
                Some(s) => s.trim().parse().map_err(|_| bad("split must be `train` or `test`"))?,
                None => Split::Train,
            };
            let path = Path::new(cols[0].trim());
            entries.push(ManifestEntry {
                path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
                class: cols[1].trim().to_string(),
                frames,
                split,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes the manifest with paths relative to `base` when possible.
    pub fn write<W: Write>(&self, mut out: W, base: &Path) -> Result<()> {
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            writeln!(out, "{}\t{}\t{}\t{}", p.display(), e.class, e.frames, e.split)?;
        }
        Ok(())
    }
}

/// One clip held in memory.
#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: SampleId,
    pub video: Arc<VideoTensor>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    /// Loads every manifest entry at `(T, H, W)`; ids follow manifest order.
    pub fn load(manifest: &DatasetManifest, frames: usize, height: usize, width: usize) -> Result<Self> {
        let items = manifest
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(DatasetItem {
                    id: SampleId(i as u64),
                    video: Arc::new(load_video(&e.path, frames, height, width)?),
                    label: manifest.class_index(&e.class).expect("class taken from the manifest"),
                    split: e.split,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            classes: manifest.classes().to_vec(),
            items,
        })
    }

    pub fn train_len(&self) -> usize {
        self.items.iter().filter(|i| i.split == Split::Train).count()
    }
}

/// Frame indices for sampling `target` frames out of `available`:
/// `round(i (n - 1) / (T - 1))`.
pub fn frame_indices(available: usize, target: usize) -> Vec<usize> {
    if target == 1 || available == 1 {
        return vec![0; target];
    }
    let span = (available - 1) as f64 / (target - 1) as f64;
    (0..target).map(|i| (i as f64 * span).round() as usize).collect()
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Loads a clip as a `(3, T, H, W)` tensor in `[0, 1]` from a directory of
/// numbered frames, or as stored from a raw tensor file.
pub fn load_video(path: &Path, frames: usize, height: usize, width: usize) -> Result<VideoTensor> {
    let fail = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    if frames == 0 || height == 0 || width == 0 {
        return Err(fail("target geometry must be positive".into()));
    }
    let meta = fs::metadata(path).map_err(|e| fail(e.to_string()))?;
    if meta.is_dir() {
        load_frame_dir(path, frames, height, width)
    } else {
        let (shape, data) = read_tensor(path)?;
        let [c, t, h, w]: [usize; 4] = shape
            .as_slice()
            .try_into()
            .map_err(|_| fail(format!("expected a rank-4 tensor, found shape {shape:?}")))?;
        if (h, w) != (height, width) {
            return Err(fail(format!("frame size {h}x{w} differs from the configured {height}x{width}")));
        }
        if t == 0 {
            return Err(fail("clip has no frames".into()));
        }
        let src = VideoTensor::new([c, t, h, w], data).map_err(|e| fail(e.to_string()))?;
        if t == frames {
            return Ok(src);
        }
        let idx = frame_indices(t, frames);
        let mut out = Vec::with_capacity(c * frames * h * w);
        for ci in 0..c {
            for &ti in &idx {
                let start = src.index(ci, ti, 0, 0);
                out.extend_from_slice(&src.data()[start..start + h * w]);
            }
        }
        VideoTensor::new([c, frames, h, w], out)
    }
}

/// Sort key placing `frame_2.png` before `frame_10.png`.
fn frame_key(p: &Path) -> (u64, String) {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    (digits.parse().unwrap_or(u64::MAX), stem)
}

fn load_frame_dir(dir: &Path, frames: usize, height: usize, width: usize) -> Result<VideoTensor> {
    let fail = |reason: String| Error::Load {
        path: dir.to_path_buf(),
        reason,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| fail(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    if files.is_empty() {
        return Err(fail("no frames found".into()));
    }
    files.sort_by_key(|p| frame_key(p));
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * frames * plane];
    for (t, &fi) in frame_indices(files.len(), frames).iter().enumerate() {
        let file = &files[fi];
        let img = image::open(file)
            .map_err(|e| Error::Load {
                path: file.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let img = if img.dimensions() == (width as u32, height as u32) {
            img
        } else {
            image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
        };
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(c * frames + t) * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
    }
    VideoTensor::new([3, frames, height, width], data)
}

/// How many training clips keep their labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    /// Total labeled clips, spread over classes in proportion to size.
    pub budget: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Budget for a labeled fraction of `train_len` clips, rounded to nearest.
    pub fn from_fraction(fraction: f64, train_len: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("label fraction must be in [0, 1], got {fraction}")));
        }
        Ok(Self {
            budget: (fraction * train_len as f64).round() as usize,
            seed,
        })
    }
}

/// Largest-remainder allocation of `budget` over classes of the given sizes.
/// Equal remainders favour the lower class index.
pub fn allocate(sizes: &[usize], budget: usize, names: &[String]) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if budget > total {
        let over: Vec<String> = sizes
            .iter()
            .zip(names)
            .filter(|(&n, _)| n > 0 || total == 0)
            .map(|(n, name)| format!("{name} (has {n})"))
            .collect();
        return Err(Error::Split(format!(
            "budget {budget} exceeds the {total} training clips; classes short of their quota: {}",
            over.join(", ")
        )));
    }
    if total == 0 {
        return Ok(vec![0; sizes.len()]);
    }
    let mut counts: Vec<usize> = sizes.iter().map(|&n| budget * n / total).collect();
    let mut rest: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(c, &n)| (budget * n % total, c)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = budget - counts.iter().sum::<usize>();
    for &(_, c) in rest.iter().take(missing) {
        counts[c] += 1;
    }
    for (c, (&k, &n)) in counts.iter().zip(sizes).enumerate() {
        if k > n {
            return Err(Error::Split(format!("class {} needs {k} labels but has {n} clips", names[c])));
        }
    }
    Ok(counts)
}

/// Splits the training clips into labeled and unlabeled parts. The labels of
/// unlabeled clips move to `unlabeled_truth`; test clips pass through.
pub fn make_split(ds: &Dataset, spec: &SplitSpec) -> Result<TrainData> {
    let classes = ds.classes.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, item) in ds.items.iter().enumerate() {
        if item.split == Split::Train {
            by_class[item.label].push(i);
        }
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = allocate(&sizes, spec.budget, &ds.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled_idx = BTreeSet::new();
    for (members, &k) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        labeled_idx.extend(members.iter().take(k).copied());
    }

    let mut data = TrainData::default();
    let mut truth = BTreeMap::new();
    for (i, item) in ds.items.iter().enumerate() {
        match item.split {
            Split::Test => data.test.push(LabeledSample {
                id: item.id,
                video: Arc::clone(&item.video),
                label: item.label,
            }),
            Split::Train if labeled_idx.contains(&i) => data.labeled.push(LabeledSample {
                id: item.id,
                video: Arc::clone(&item.video),
                label: item.label,
            }),
            Split::Train => {
                truth.insert(item.id, item.label);
                data.unlabeled.push(UnlabeledSample {
                    id: item.id,
                    video: Arc::clone(&item.video),
                });
            }
        }
    }
    data.unlabeled_truth = truth;
    Ok(data)
}
