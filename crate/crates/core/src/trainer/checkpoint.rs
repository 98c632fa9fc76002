//! Binary checkpoints.
//!
//! Layout: magic `SIAVCCKP`, u32 version, u64 metadata length, JSON metadata,
//! u64 parameter count, parameters and momentum buffers as little-endian f32,
//! then a CRC-32 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochSampler, EvalMetrics, Sgd, TrainData, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{CubeEmbedConfig, ParamLayout, SiavcModel};
use crate::sab::LossHistoryStore;
use crate::thresholds::ThresholdState;
use crate::types::{SampleId, VideoTensor};
use crate::vcam::{AugmentationQueues, QueueSnapshot};

const MAGIC: &[u8; 8] = b"SIAVCCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// File name for the checkpoint taken after `step` steps.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: RunConfig,
    embed: CubeEmbedConfig,
    layout: ParamLayout,
    step: u64,
    thresholds: ThresholdState,
    sab: LossHistoryStore,
    queues: QueueSnapshot,
    rng: ChaCha8Rng,
    labeled_sampler: EpochSampler,
    unlabeled_sampler: EpochSampler,
    last_eval: Option<EvalMetrics>,
    best_eval: Option<(u64, EvalMetrics)>,
    labeled_ids: Vec<SampleId>,
    unlabeled_ids: Vec<SampleId>,
}

struct Decoded {
    meta: Meta,
    params: Vec<f32>,
    velocity: Vec<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(meta: &Meta, params: &[f32], velocity: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut buf = Vec::with_capacity(json.len() + 8 * params.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    buf.write_u64::<LittleEndian>(json.len() as u64)?;
    buf.extend_from_slice(&json);
    buf.write_u64::<LittleEndian>(params.len() as u64)?;
    for &v in params.iter().chain(velocity) {
        buf.write_f32::<LittleEndian>(v)?;
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc)?;
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 4 {
        return Err(corrupt("file is too short"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Cursor::new(&bytes[MAGIC.len()..]);
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let stored = Cursor::new(tail).read_u32::<LittleEndian>()?;
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch (truncated or corrupt file)"));
    }
    let mut r = Cursor::new(&body[MAGIC.len() + 4..]);
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let remaining = body.len() - MAGIC.len() - 4 - 8;
    if meta_len > remaining {
        return Err(corrupt("metadata length exceeds file size"));
    }
    let mut json = vec![0u8; meta_len];
    r.read_exact(&mut json)?;
    let meta: Meta = serde_json::from_slice(&json)?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n != meta.layout.len() || (remaining - meta_len - 8) != 8 * n {
        return Err(corrupt(format!(
            "parameter payload does not match layout of {} scalars",
            meta.layout.len()
        )));
    }
    let mut params = vec![0.0f32; n];
    let mut velocity = vec![0.0f32; n];
    r.read_f32_into::<LittleEndian>(&mut params)?;
    r.read_f32_into::<LittleEndian>(&mut velocity)?;
    Ok(Decoded { meta, params, velocity })
}

fn rebuild_model(meta: &Meta, params: Vec<f32>) -> Result<SiavcModel> {
    // parameters are overwritten right away, so the init seed is irrelevant
    let mut model = SiavcModel::from_config(&meta.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.layout() != &meta.layout || model.embed_config() != &meta.embed {
        return Err(corrupt("model layout differs from the one in the checkpoint"));
    }
    model.set_params(params)?;
    Ok(model)
}

/// Reads only the configuration and model weights of a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, SiavcModel)> {
    let d = decode(&fs::read(path)?)?;
    let model = rebuild_model(&d.meta, d.params)?;
    Ok((d.meta.config, model))
}

impl Trainer {
    /// Writes the full training state to `path` atomically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.cfg.clone(),
            embed: self.model.embed_config().clone(),
            layout: self.model.layout().clone(),
            step: self.step,
            thresholds: self.thresholds.clone(),
            sab: self.sab.clone(),
            queues: self.queues.snapshot(),
            rng: self.rng.clone(),
            labeled_sampler: self.labeled_sampler.clone(),
            unlabeled_sampler: self.unlabeled_sampler.clone(),
            last_eval: self.last_eval,
            best_eval: self.best_eval,
            labeled_ids: self.data.labeled.iter().map(|s| s.id).collect(),
            unlabeled_ids: self.data.unlabeled.iter().map(|s| s.id).collect(),
        };
        let bytes = encode(&meta, self.model.params(), self.opt.velocity())?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores a trainer from `path`. `data` must be the split the
    /// checkpoint was taken on. Nothing is built unless the whole file
    /// validates.
    pub fn load_checkpoint(path: &Path, data: TrainData) -> Result<Self> {
        let Decoded { meta, params, velocity } = decode(&fs::read(path)?)?;
        let labeled_ids: Vec<SampleId> = data.labeled.iter().map(|s| s.id).collect();
        let unlabeled_ids: Vec<SampleId> = data.unlabeled.iter().map(|s| s.id).collect();
        if labeled_ids != meta.labeled_ids || unlabeled_ids != meta.unlabeled_ids {
            return Err(corrupt("checkpoint was taken on a different data split"));
        }
        meta.config.validate()?;
        data.check(&meta.config)?;
        let model = rebuild_model(&meta, params)?;
        let mut opt = Sgd::new(meta.config.momentum, meta.config.weight_decay, model.layout().decay_mask());
        opt.set_velocity(velocity);

        let mut videos: BTreeMap<SampleId, Arc<VideoTensor>> = BTreeMap::new();
        for s in &data.labeled {
            videos.insert(s.id, Arc::clone(&s.video));
        }
        for s in &data.unlabeled {
            videos.insert(s.id, Arc::clone(&s.video));
        }
        let queues = AugmentationQueues::restore(&meta.queues, |id| videos.get(&id).cloned())?;
        if meta.thresholds.num_classes() != meta.config.num_classes {
            return Err(corrupt("threshold state has the wrong class count"));
        }
        Ok(Self {
            cfg: meta.config,
            data,
            model,
            opt,
            thresholds: meta.thresholds,
            sab: meta.sab,
            queues,
            rng: meta.rng,
            labeled_sampler: meta.labeled_sampler,
            unlabeled_sampler: meta.unlabeled_sampler,
            step: meta.step,
            last_eval: meta.last_eval,
            best_eval: meta.best_eval,
            sab_events: Vec::new(),
        })
    }
}
