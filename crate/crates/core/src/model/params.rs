use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Handle to one named tensor inside a [`ParamLayout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// How a tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Truncated normal (cut at two standard deviations), std 0.02.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    /// Module path, e.g. `encoder.blocks.0.attn.qkv.weight`.
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether weight decay applies to this tensor.
    pub decay: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable tensors of a model packed into one flat buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], decay: bool, init: Init) -> ParamId {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            decay,
            init,
        };
        self.len += spec.len();
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        self.specs[id.0].range()
    }

    pub fn get<'a>(&self, data: &'a [f32], id: ParamId) -> &'a [f32] {
        &data[self.range(id)]
    }

    pub fn get_mut<'a>(&self, data: &'a mut [f32], id: ParamId) -> &'a mut [f32] {
        &mut data[self.range(id)]
    }

    /// Per-scalar weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for s in &self.specs {
            mask[s.range()].fill(s.decay);
        }
        mask
    }

    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut data = vec![0.0f32; self.len];
        for s in &self.specs {
            let slot = &mut data[s.range()];
            match s.init {
                Init::Zeros => slot.fill(0.0),
                Init::Ones => slot.fill(1.0),
                Init::TruncNormal => {
                    for v in slot.iter_mut() {
                        *v = loop {
                            let x = normal.sample(rng);
                            if x.abs() <= 0.04 {
                                break x;
                            }
                        };
                    }
                }
            }
        }
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_packs_contiguously() {
        let mut l = ParamLayout::default();
        let a = l.add("a.weight", &[3, 4], true, Init::TruncNormal);
        let b = l.add("a.bias", &[4], false, Init::Zeros);
        assert_eq!(l.range(a), 0..12);
        assert_eq!(l.range(b), 12..16);
        assert_eq!(l.len(), 16);
        let mask = l.decay_mask();
        assert!(mask[..12].iter().all(|&m| m));
        assert!(mask[12..].iter().all(|&m| !m));
    }

    #[test]
    fn init_respects_kinds() {
        let mut l = ParamLayout::default();
        let w = l.add("w", &[1000], true, Init::TruncNormal);
        let g = l.add("g", &[5], false, Init::Ones);
        let data = l.initialize(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(l.get(&data, w).iter().all(|v| v.abs() <= 0.04));
        let std = (l.get(&data, w).iter().map(|v| v * v).sum::<f32>() / 1000.0).sqrt();
        assert!(std > 0.012 && std < 0.02);
        assert_eq!(l.get(&data, g), &[1.0; 5]);
    }
}
