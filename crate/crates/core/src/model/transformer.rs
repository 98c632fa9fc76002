//! Pre-norm transformer encoder with learned positional embeddings and mean
//! pooling, with a hand-written backward pass.

use super::linalg::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_rows, LnCache, View, ViewMut,
};
use super::params::{Init, ParamId, ParamLayout};

/// A token encoder mapping `videos x tokens x dim` to `videos x dim`.
///
/// Implementations register their tensors in the shared [`ParamLayout`] and
/// read them from the flat parameter buffer on every call.
pub trait Encoder {
    type Cache;

    fn dim(&self) -> usize;

    /// `tokens` is row-major `(videos * tokens_per_video) x dim`.
    fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f32],
        tokens: Vec<f32>,
        videos: usize,
    ) -> (Vec<f32>, Self::Cache);

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input tokens.
    fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f32],
        cache: &Self::Cache,
        d_latent: &[f32],
        grads: &mut [f32],
    ) -> Vec<f32>;
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

pub struct TransformerEncoder {
    dim: usize,
    heads: usize,
    hidden: usize,
    tokens: usize,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    norm_g: ParamId,
    norm_b: ParamId,
}

struct BlockCache {
    ln1: LnCache,
    h1: Vec<f32>,
    qkv: Vec<f32>,
    /// Attention probabilities, `videos x heads x tokens x tokens`.
    att: Vec<f32>,
    ctx: Vec<f32>,
    ln2: LnCache,
    h2: Vec<f32>,
    m1: Vec<f32>,
    act: Vec<f32>,
}

pub struct TransformerCache {
    videos: usize,
    blocks: Vec<BlockCache>,
    norm: LnCache,
}

impl TransformerEncoder {
    pub fn new(
        layout: &mut ParamLayout,
        prefix: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        tokens: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        let hidden = dim * mlp_ratio;
        let pos = layout.add(format!("{prefix}.pos_embed"), &[tokens, dim], true, Init::TruncNormal);
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("{prefix}.blocks.{i}");
                BlockParams {
                    ln1_g: layout.add(format!("{p}.norm1.weight"), &[dim], false, Init::Ones),
                    ln1_b: layout.add(format!("{p}.norm1.bias"), &[dim], false, Init::Zeros),
                    qkv_w: layout.add(format!("{p}.attn.qkv.weight"), &[dim, 3 * dim], true, Init::TruncNormal),
                    qkv_b: layout.add(format!("{p}.attn.qkv.bias"), &[3 * dim], false, Init::Zeros),
                    proj_w: layout.add(format!("{p}.attn.proj.weight"), &[dim, dim], true, Init::TruncNormal),
                    proj_b: layout.add(format!("{p}.attn.proj.bias"), &[dim], false, Init::Zeros),
                    ln2_g: layout.add(format!("{p}.norm2.weight"), &[dim], false, Init::Ones),
                    ln2_b: layout.add(format!("{p}.norm2.bias"), &[dim], false, Init::Zeros),
                    fc1_w: layout.add(format!("{p}.mlp.fc1.weight"), &[dim, hidden], true, Init::TruncNormal),
                    fc1_b: layout.add(format!("{p}.mlp.fc1.bias"), &[hidden], false, Init::Zeros),
                    fc2_w: layout.add(format!("{p}.mlp.fc2.weight"), &[hidden, dim], true, Init::TruncNormal),
                    fc2_b: layout.add(format!("{p}.mlp.fc2.bias"), &[dim], false, Init::Zeros),
                }
            })
            .collect();
        let norm_g = layout.add(format!("{prefix}.norm.weight"), &[dim], false, Init::Ones);
        let norm_b = layout.add(format!("{prefix}.norm.bias"), &[dim], false, Init::Zeros);
        Self {
            dim,
            heads,
            hidden,
            tokens,
            pos,
            blocks,
            norm_g,
            norm_b,
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn attention(&self, qkv: &[f32], videos: usize) -> (Vec<f32>, Vec<f32>) {
        let (n, d, hd) = (self.tokens, self.dim, self.head_dim());
        let scale = 1.0 / (hd as f32).sqrt();
        let mut att = vec![0.0f32; videos * self.heads * n * n];
        let mut ctx = vec![0.0f32; videos * n * d];
        for b in 0..videos {
            for h in 0..self.heads {
                let base = b * n * 3 * d + h * hd;
                let a_off = (b * self.heads + h) * n * n;
                let q = View::strided(qkv, base, 3 * d);
                let k = View::strided(qkv, base + d, 3 * d);
                let v = View::strided(qkv, base + 2 * d, 3 * d);
                gemm(n, hd, n, scale, q, k.t(), 0.0, ViewMut::mat(&mut att, a_off, n));
                softmax_rows(&mut att[a_off..a_off + n * n], n);
                gemm(
                    n,
                    n,
                    hd,
                    1.0,
                    View::mat(&att, a_off, n),
                    v,
                    0.0,
                    ViewMut::strided(&mut ctx, b * n * d + h * hd, d),
                );
            }
        }
        (att, ctx)
    }

    fn attention_backward(&self, qkv: &[f32], att: &[f32], d_ctx: &[f32], videos: usize) -> Vec<f32> {
        let (n, d, hd) = (self.tokens, self.dim, self.head_dim());
        let scale = 1.0 / (hd as f32).sqrt();
        let mut d_qkv = vec![0.0f32; qkv.len()];
        let mut d_att = vec![0.0f32; n * n];
        for b in 0..videos {
            for h in 0..self.heads {
                let base = b * n * 3 * d + h * hd;
                let a_off = (b * self.heads + h) * n * n;
                let p = View::mat(att, a_off, n);
                let dc = View::strided(d_ctx, b * n * d + h * hd, d);
                // dP = dctx V^T ; dV = P^T dctx
                gemm(n, hd, n, 1.0, dc, View::strided(qkv, base + 2 * d, 3 * d).t(), 0.0, ViewMut::mat(&mut d_att, 0, n));
                gemm(n, n, hd, 1.0, p.t(), dc, 0.0, ViewMut::strided(&mut d_qkv, base + 2 * d, 3 * d));
                // softmax backward, in place on dP
                for r in 0..n {
                    let pr = &att[a_off + r * n..a_off + (r + 1) * n];
                    let gr = &mut d_att[r * n..(r + 1) * n];
                    let dot: f32 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (g, &pv) in gr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                // dQ = scale dS K ; dK = scale dS^T Q
                gemm(n, n, hd, scale, View::mat(&d_att, 0, n), View::strided(qkv, base + d, 3 * d), 0.0, ViewMut::strided(&mut d_qkv, base, 3 * d));
                gemm(n, n, hd, scale, View::mat(&d_att, 0, n).t(), View::strided(qkv, base, 3 * d), 0.0, ViewMut::strided(&mut d_qkv, base + d, 3 * d));
            }
        }
        d_qkv
    }
}

impl Encoder for TransformerEncoder {
    type Cache = TransformerCache;

    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f32],
        mut x: Vec<f32>,
        videos: usize,
    ) -> (Vec<f32>, TransformerCache) {
        let (n, d) = (self.tokens, self.dim);
        let rows = videos * n;
        assert_eq!(x.len(), rows * d, "token buffer does not match videos x tokens x dim");
        let p = |id| layout.get(params, id);

        let pos = p(self.pos);
        for tok in x.chunks_exact_mut(n * d) {
            for (v, pe) in tok.iter_mut().zip(pos) {
                *v += pe;
            }
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h1, ln1) = layer_norm(&x, d, p(blk.ln1_g), p(blk.ln1_b));
            let qkv = linear(&h1, rows, d, p(blk.qkv_w), p(blk.qkv_b), 3 * d);
            let (att, ctx) = self.attention(&qkv, videos);
            let proj = linear(&ctx, rows, d, p(blk.proj_w), p(blk.proj_b), d);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            let (h2, ln2) = layer_norm(&x, d, p(blk.ln2_g), p(blk.ln2_b));
            let m1 = linear(&h2, rows, d, p(blk.fc1_w), p(blk.fc1_b), self.hidden);
            let act: Vec<f32> = m1.iter().map(|&v| gelu(v)).collect();
            let m2 = linear(&act, rows, self.hidden, p(blk.fc2_w), p(blk.fc2_b), d);
            x.iter_mut().zip(&m2).for_each(|(a, b)| *a += b);

            caches.push(BlockCache {
                ln1,
                h1,
                qkv,
                att,
                ctx,
                ln2,
                h2,
                m1,
                act,
            });
        }

        let (hf, norm) = layer_norm(&x, d, p(self.norm_g), p(self.norm_b));
        let mut latent = vec![0.0f32; videos * d];
        for (b, z) in latent.chunks_exact_mut(d).enumerate() {
            for tok in hf[b * n * d..(b + 1) * n * d].chunks_exact(d) {
                z.iter_mut().zip(tok).for_each(|(a, v)| *a += v);
            }
            z.iter_mut().for_each(|a| *a /= n as f32);
        }
        (
            latent,
            TransformerCache {
                videos,
                blocks: caches,
                norm,
            },
        )
    }

    fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f32],
        cache: &TransformerCache,
        d_latent: &[f32],
        grads: &mut [f32],
    ) -> Vec<f32> {
        let (n, d) = (self.tokens, self.dim);
        let videos = cache.videos;
        let rows = videos * n;
        let p = |id| layout.get(params, id);

        let mut d_hf = vec![0.0f32; rows * d];
        for (b, dz) in d_latent.chunks_exact(d).enumerate() {
            for tok in d_hf[b * n * d..(b + 1) * n * d].chunks_exact_mut(d) {
                tok.iter_mut().zip(dz).for_each(|(a, g)| *a = g / n as f32);
            }
        }
        let mut dx = {
            let (dg, db) = two_mut(grads, layout.range(self.norm_g), layout.range(self.norm_b));
            layer_norm_backward(&cache.norm, &d_hf, d, p(self.norm_g), dg, db)
        };

        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch
            let d_act = {
                let (dw, db) = two_mut(grads, layout.range(blk.fc2_w), layout.range(blk.fc2_b));
                linear_backward(&c.act, rows, self.hidden, p(blk.fc2_w), &dx, d, dw, db)
            };
            let d_m1: Vec<f32> = d_act.iter().zip(&c.m1).map(|(g, &m)| g * gelu_grad(m)).collect();
            let d_h2 = {
                let (dw, db) = two_mut(grads, layout.range(blk.fc1_w), layout.range(blk.fc1_b));
                linear_backward(&c.h2, rows, d, p(blk.fc1_w), &d_m1, self.hidden, dw, db)
            };
            let d_ln2 = {
                let (dg, db) = two_mut(grads, layout.range(blk.ln2_g), layout.range(blk.ln2_b));
                layer_norm_backward(&c.ln2, &d_h2, d, p(blk.ln2_g), dg, db)
            };
            dx.iter_mut().zip(&d_ln2).for_each(|(a, b)| *a += b);

            // attention branch
            let d_ctx = {
                let (dw, db) = two_mut(grads, layout.range(blk.proj_w), layout.range(blk.proj_b));
                linear_backward(&c.ctx, rows, d, p(blk.proj_w), &dx, d, dw, db)
            };
            let d_qkv = self.attention_backward(&c.qkv, &c.att, &d_ctx, videos);
            let d_h1 = {
                let (dw, db) = two_mut(grads, layout.range(blk.qkv_w), layout.range(blk.qkv_b));
                linear_backward(&c.h1, rows, d, p(blk.qkv_w), &d_qkv, 3 * d, dw, db)
            };
            let d_ln1 = {
                let (dg, db) = two_mut(grads, layout.range(blk.ln1_g), layout.range(blk.ln1_b));
                layer_norm_backward(&c.ln1, &d_h1, d, p(blk.ln1_g), dg, db)
            };
            dx.iter_mut().zip(&d_ln1).for_each(|(a, b)| *a += b);
        }

        let d_pos = layout.get_mut(grads, self.pos);
        for tok in dx.chunks_exact(n * d) {
            d_pos.iter_mut().zip(tok).for_each(|(a, g)| *a += g);
        }
        dx
    }
}

/// Two disjoint mutable sub-slices of the gradient buffer.
pub(crate) fn two_mut(
    buf: &mut [f32],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f32], &mut [f32]) {
    assert!(a.end <= b.start || b.end <= a.start, "ranges overlap");
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        let first = &mut hi[..a.end - a.start];
        (first, &mut lo[b])
    }
}
