//! Patch segmentation and embedding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Graph, SeedStream, Tensor, Var};
use crate::error::{Error, Result};
pub use crate::params::PatchEmbedParams;

pub const POS_EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub latent_dim: usize,
}

/// `floor((L - P) / S) + 1`.
pub fn compute_num_patches(seq_len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "patch_len ({patch_len}) and stride ({stride}) must be positive"
        )));
    }
    if patch_len > seq_len {
        return Err(Error::Config(format!(
            "patch_len {patch_len} exceeds sequence length {seq_len}"
        )));
    }
    Ok((seq_len - patch_len) / stride + 1)
}

/// `[B, L, C] -> [B, C, N, P]`; patch `n` of channel `c` is
/// `x[b, n*S .. n*S + P, c]`. Tail samples beyond the last patch are dropped.
pub fn segment_patches(g: &mut Graph, x: Var, cfg: &PatchConfig) -> Result<Var> {
    let xs = g.shape(x);
    if xs.len() != 3 {
        return Err(Error::Contract(format!(
            "segment_patches expects [B, L, C], got {xs:?}"
        )));
    }
    compute_num_patches(xs[1], cfg.patch_len, cfg.stride)?;
    let by_channel = g.permute(x, &[0, 2, 1])?;
    g.frames(by_channel, cfg.patch_len, cfg.stride)
}

/// `patches · weight + bias + pos[n]`, the same map for every channel.
pub fn embed_patches(g: &mut Graph, patches: Var, p: &PatchEmbedParams<Var>) -> Result<Var> {
    let ps = g.shape(patches).to_vec();
    let pos = g.shape(p.pos).to_vec();
    if ps.len() != 4 {
        return Err(Error::Contract(format!(
            "embed_patches expects [B, C, N, P], got {ps:?}"
        )));
    }
    if pos.len() != 2 || pos[0] != ps[2] {
        return Err(Error::Config(format!(
            "positional table has {} rows but the input has {} patches",
            pos.first().copied().unwrap_or(0),
            ps[2]
        )));
    }
    let projected = g.matmul(patches, p.weight)?;
    let biased = g.add(projected, p.bias)?;
    g.add(biased, p.pos)
}

impl PatchEmbedParams {
    pub fn init(patch_len: usize, latent_dim: usize, num_patches: usize, seeds: &mut SeedStream) -> Self {
        let bound = (1.0 / patch_len as f64).sqrt();
        let mut rng = seeds.rng();
        let weight = Tensor::from_fn([patch_len, latent_dim], |_| rng.random_range(-bound..bound));
        let normal = Normal::new(0.0, POS_EMBED_STD).expect("positive std");
        let mut rng = seeds.rng();
        let pos = Tensor::from_fn([num_patches, latent_dim], |_| normal.sample(&mut rng));
        PatchEmbedParams {
            weight,
            bias: Tensor::zeros([latent_dim]),
            pos,
        }
    }
}
