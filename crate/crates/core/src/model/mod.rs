//! Video backbone: cube embedding, token encoder, classifier and
//! discriminator heads sharing one latent.

mod linalg;
mod params;
mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use params::{Init, ParamId, ParamLayout, ParamSpec};
pub use transformer::{Encoder, TransformerCache, TransformerEncoder};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::types::{Prediction, VideoTensor};
use linalg::{gemm, linear, linear_backward, View, ViewMut};
use transformer::two_mut;

/// Spatio-temporal patch geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeEmbedConfig {
    /// Video shape `(C, T, H, W)`.
    pub video: [usize; 4],
    /// Patch extent `(t, h, w)`.
    pub patch: [usize; 3],
    pub embed_dim: usize,
    /// Input normalisation applied to every pixel before projection.
    pub input_mean: f32,
    pub input_std: f32,
}

impl CubeEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let [_, t, h, w] = self.video;
        let [tp, hp, wp] = self.patch;
        if tp == 0 || hp == 0 || wp == 0 || t % tp != 0 || h % hp != 0 || w % wp != 0 {
            return Err(Error::Config(format!(
                "patch {:?} does not tile video {:?}",
                self.patch, self.video
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return Err(Error::Config(format!("input_std must be positive, got {}", self.input_std)));
        }
        Ok(())
    }

    /// Tokens per video.
    pub fn tokens(&self) -> usize {
        let [_, t, h, w] = self.video;
        let [tp, hp, wp] = self.patch;
        (t / tp) * (h / hp) * (w / wp)
    }

    /// Scalars per flattened cube.
    pub fn cube_len(&self) -> usize {
        self.video[0] * self.patch.iter().product::<usize>()
    }
}

/// Token sequence of one video, `len x dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Pooled video representation.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f32>,
}

/// Outputs of a batched forward pass plus what backward needs.
pub struct Forward<C> {
    pub videos: usize,
    /// `videos x classes` raw classifier scores.
    pub logits: Vec<f32>,
    /// Discriminator pre-activation per video.
    pub disc_logits: Vec<f32>,
    /// `videos x dim` pooled latents.
    pub latents: Vec<f32>,
    patches: Vec<f32>,
    cache: C,
}

impl<C> Forward<C> {
    pub fn logits_row(&self, i: usize) -> &[f32] {
        let k = self.logits.len() / self.videos;
        &self.logits[i * k..(i + 1) * k]
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        (0..self.videos)
            .map(|i| Prediction::from_logits(self.logits_row(i)))
            .collect()
    }

    /// Logits widened to `f64`, one row per video.
    pub fn logits_f64(&self) -> Vec<Vec<f64>> {
        (0..self.videos)
            .map(|i| self.logits_row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }
}

/// Model with a pluggable encoder. The default is a small transformer.
pub struct VideoModel<E: Encoder = TransformerEncoder> {
    embed: CubeEmbedConfig,
    classes: usize,
    layout: ParamLayout,
    params: Vec<f32>,
    embed_w: ParamId,
    embed_b: ParamId,
    encoder: E,
    cls_w: ParamId,
    cls_b: ParamId,
    dis_w: ParamId,
    dis_b: ParamId,
}

pub type SiavcModel = VideoModel<TransformerEncoder>;

impl SiavcModel {
    /// Default backbone for a run configuration, initialised from `rng`.
    pub fn from_config<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        Self::with_transformer(cfg.video_shape(), &cfg.model, cfg.num_classes, rng)
    }

    pub fn with_transformer<R: Rng + ?Sized>(
        video: [usize; 4],
        mc: &ModelConfig,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = CubeEmbedConfig {
            video,
            patch: mc.patch,
            embed_dim: mc.embed_dim,
            input_mean: mc.input_mean as f32,
            input_std: mc.input_std as f32,
        };
        embed.validate()?;
        if mc.heads == 0 || mc.embed_dim % mc.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                mc.embed_dim, mc.heads
            )));
        }
        let tokens = embed.tokens();
        VideoModel::build(embed, classes, rng, |layout| {
            TransformerEncoder::new(layout, "encoder", mc.embed_dim, mc.depth, mc.heads, mc.mlp_ratio, tokens)
        })
    }
}

impl<E: Encoder> VideoModel<E> {
    /// Assembles a model around the encoder returned by `make_encoder`.
    pub fn build<R, F>(embed: CubeEmbedConfig, classes: usize, rng: &mut R, make_encoder: F) -> Result<Self>
    where
        R: Rng + ?Sized,
        F: FnOnce(&mut ParamLayout) -> E,
    {
        embed.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let d = embed.embed_dim;
        let mut layout = ParamLayout::default();
        let embed_w = layout.add("embed.proj.weight", &[embed.cube_len(), d], true, Init::TruncNormal);
        let embed_b = layout.add("embed.proj.bias", &[d], false, Init::Zeros);
        let encoder = make_encoder(&mut layout);
        if encoder.dim() != d {
            return Err(Error::Config(format!(
                "encoder width {} differs from embed_dim {d}",
                encoder.dim()
            )));
        }
        let cls_w = layout.add("cls.weight", &[d, classes], true, Init::TruncNormal);
        let cls_b = layout.add("cls.bias", &[classes], false, Init::Zeros);
        let dis_w = layout.add("dis.weight", &[d, 1], true, Init::TruncNormal);
        let dis_b = layout.add("dis.bias", &[1], false, Init::Zeros);
        let params = layout.initialize(rng);
        Ok(Self {
            embed,
            classes,
            layout,
            params,
            embed_w,
            embed_b,
            encoder,
            cls_w,
            cls_b,
            dis_w,
            dis_b,
        })
    }

    pub fn embed_config(&self) -> &CubeEmbedConfig {
        &self.embed
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Replaces all parameters; the length must match the layout.
    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Shape {
                expected: vec![self.layout.len()],
                actual: vec![params.len()],
            });
        }
        self.params = params;
        Ok(())
    }

    fn p(&self, id: ParamId) -> &[f32] {
        self.layout.get(&self.params, id)
    }

    /// Flattens every normalised cube of `v` in `(c, dt, dh, dw)` order,
    /// cubes in `(t, h, w)` grid order.
    fn patchify(&self, v: &VideoTensor, out: &mut Vec<f32>) -> Result<()> {
        if v.shape() != self.embed.video {
            return Err(Error::Shape {
                expected: self.embed.video.to_vec(),
                actual: v.shape().to_vec(),
            });
        }
        let [c, t, h, w] = self.embed.video;
        let [tp, hp, wp] = self.embed.patch;
        let data = v.data();
        let (mean, inv_std) = (self.embed.input_mean, 1.0 / self.embed.input_std);
        for t0 in (0..t).step_by(tp) {
            for h0 in (0..h).step_by(hp) {
                for w0 in (0..w).step_by(wp) {
                    for ci in 0..c {
                        for dt in 0..tp {
                            for dh in 0..hp {
                                let start = v.index(ci, t0 + dt, h0 + dh, w0);
                                out.extend(data[start..start + wp].iter().map(|&x| (x - mean) * inv_std));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Projects each cube of `v` to a token of width `embed_dim`.
    pub fn cube_embed(&self, v: &VideoTensor) -> Result<Tokens> {
        let mut patches = Vec::with_capacity(self.embed.tokens() * self.embed.cube_len());
        self.patchify(v, &mut patches)?;
        let n = self.embed.tokens();
        let d = self.embed.embed_dim;
        let data = linear(&patches, n, self.embed.cube_len(), self.p(self.embed_w), self.p(self.embed_b), d);
        Ok(Tokens { len: n, dim: d, data })
    }

    /// Runs the encoder on one token sequence.
    pub fn encode(&self, tokens: &Tokens) -> Result<LatentVector> {
        if tokens.len != self.embed.tokens() || tokens.dim != self.embed.embed_dim {
            return Err(Error::Shape {
                expected: vec![self.embed.tokens(), self.embed.embed_dim],
                actual: vec![tokens.len, tokens.dim],
            });
        }
        let (z, _) = self.encoder.forward(&self.layout, &self.params, tokens.data.clone(), 1);
        Ok(LatentVector { z })
    }

    pub fn classify(&self, z: &LatentVector) -> Prediction {
        let logits = linear(&z.z, 1, z.z.len(), self.p(self.cls_w), self.p(self.cls_b), self.classes);
        Prediction::from_logits(&logits)
    }

    /// Probability that `z` comes from the unlabeled side.
    pub fn discriminate(&self, z: &LatentVector) -> f64 {
        let s = linear(&z.z, 1, z.z.len(), self.p(self.dis_w), self.p(self.dis_b), 1)[0] as f64;
        1.0 / (1.0 + (-s).exp())
    }

    /// Batched forward pass over `videos`.
    pub fn forward(&self, videos: &[&VideoTensor]) -> Result<Forward<E::Cache>> {
        let b = videos.len();
        let (n, d, p) = (self.embed.tokens(), self.embed.embed_dim, self.embed.cube_len());
        let mut patches = Vec::with_capacity(b * n * p);
        for v in videos {
            self.patchify(v, &mut patches)?;
        }
        let tokens = linear(&patches, b * n, p, self.p(self.embed_w), self.p(self.embed_b), d);
        let (latents, cache) = self.encoder.forward(&self.layout, &self.params, tokens, b);
        let logits = linear(&latents, b, d, self.p(self.cls_w), self.p(self.cls_b), self.classes);
        let disc_logits = linear(&latents, b, d, self.p(self.dis_w), self.p(self.dis_b), 1);
        Ok(Forward {
            videos: b,
            logits,
            disc_logits,
            latents,
            patches,
            cache,
        })
    }

    /// Accumulates parameter gradients of a scalar objective into `grads`,
    /// given its gradients with respect to the logits and discriminator
    /// pre-activations of `fwd`.
    pub fn backward(&self, fwd: &Forward<E::Cache>, d_logits: &[f32], d_disc: Option<&[f32]>, grads: &mut [f32]) {
        let b = fwd.videos;
        let (n, d, p) = (self.embed.tokens(), self.embed.embed_dim, self.embed.cube_len());
        assert_eq!(grads.len(), self.layout.len());
        assert_eq!(d_logits.len(), b * self.classes);

        let mut d_latent = {
            let (dw, db) = two_mut(grads, self.layout.range(self.cls_w), self.layout.range(self.cls_b));
            linear_backward(&fwd.latents, b, d, self.p(self.cls_w), d_logits, self.classes, dw, db)
        };
        if let Some(dd) = d_disc {
            assert_eq!(dd.len(), b);
            let (dw, db) = two_mut(grads, self.layout.range(self.dis_w), self.layout.range(self.dis_b));
            let extra = linear_backward(&fwd.latents, b, d, self.p(self.dis_w), dd, 1, dw, db);
            d_latent.iter_mut().zip(&extra).for_each(|(a, g)| *a += g);
        }
        let d_tokens = self.encoder.backward(&self.layout, &self.params, &fwd.cache, &d_latent, grads);

        let (dw, db) = two_mut(grads, self.layout.range(self.embed_w), self.layout.range(self.embed_b));
        for row in d_tokens.chunks_exact(d) {
            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
        gemm(
            p,
            b * n,
            d,
            1.0,
            View::mat(&fwd.patches, 0, p).t(),
            View::mat(&d_tokens, 0, d),
            1.0,
            ViewMut::mat(dw, 0, d),
        );
    }
}
