//! Named parameter groups.
//!
//! Each group is generic over its leaf type so the same structure can hold
//! concrete tensors, tape handles, gradients or optimizer moments. Leaves are
//! addressed by dotted names (`blocks.0.channel.attn.wq`), which form the
//! flat registry used by checkpoints and the optimizer.

use rand::Rng;

use crate::engine::{SeedStream, Tensor};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident { $( $(#[$fmeta:meta])* $field:ident ),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $( $(#[$fmeta])* pub $field: T, )*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> $name<U> {
                $name { $( $field: f(&self.$field), )* }
            }

            pub fn try_map_named<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name { $( $field: f(&join(prefix, stringify!($field)), &self.$field)?, )* })
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $( f(join(prefix, stringify!($field)), &self.$field); )*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
                $( f(join(prefix, stringify!($field)), &mut self.$field); )*
            }
        }
    };
}

param_group! {
    /// Learnable affine of reversible instance normalisation.
    pub struct RevinParams {
        /// `[C]`, initialised to one.
        gamma,
        /// `[C]`, initialised to zero.
        beta,
    }
}

param_group! {
    /// Shared per-patch projection plus positional table.
    pub struct PatchEmbedParams {
        /// `[P, D]`
        weight,
        /// `[D]`
        bias,
        /// `[N, D]`
        pos,
    }
}

param_group! {
    pub struct TemporalParams {
        /// `[N, N]`, contracts the patch axis.
        w_time,
        norm_gain,
        norm_bias,
    }
}

param_group! {
    /// Input and output projections of one multi-head attention layer.
    /// Weights are `[D, D]` (applied as `x · W`), biases `[D]`.
    pub struct AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo }
}

param_group! {
    /// Flattened-feature projection `[N·D, T]` and its bias `[T]`.
    pub struct HeadParams { weight, bias }
}

/// Attention followed by residual layer norm. Serves both the channel
/// branch and the global inter-patch stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams<T = Tensor> {
    pub attn: AttentionParams<T>,
    pub norm_gain: T,
    pub norm_bias: T,
}

impl<T> AttentionBlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionBlockParams<U> {
        let mapped: Result<_, std::convert::Infallible> = self.try_map_named("", &mut |_, t| Ok(f(t)));
        match mapped {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    pub fn try_map_named<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<AttentionBlockParams<U>, E> {
        Ok(AttentionBlockParams {
            attn: self.attn.try_map_named(&join(prefix, "attn"), f)?,
            norm_gain: f(&join(prefix, "norm_gain"), &self.norm_gain)?,
            norm_bias: f(&join(prefix, "norm_bias"), &self.norm_bias)?,
        })
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attn.visit(&join(prefix, "attn"), f);
        f(join(prefix, "norm_gain"), &self.norm_gain);
        f(join(prefix, "norm_bias"), &self.norm_bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(join(prefix, "norm_gain"), &mut self.norm_gain);
        f(join(prefix, "norm_bias"), &mut self.norm_bias);
    }
}

/// One dual-branch block followed by one global inter-patch block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub temporal: TemporalParams<T>,
    pub channel: AttentionBlockParams<T>,
    pub global: AttentionBlockParams<T>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        let mapped: Result<_, std::convert::Infallible> = self.try_map_named("", &mut |_, t| Ok(f(t)));
        match mapped {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    pub fn try_map_named<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<BlockParams<U>, E> {
        Ok(BlockParams {
            temporal: self.temporal.try_map_named(&join(prefix, "temporal"), f)?,
            channel: self.channel.try_map_named(&join(prefix, "channel"), f)?,
            global: self.global.try_map_named(&join(prefix, "global"), f)?,
        })
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.channel.visit(&join(prefix, "channel"), f);
        self.global.visit(&join(prefix, "global"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.temporal.visit_mut(&join(prefix, "temporal"), f);
        self.channel.visit_mut(&join(prefix, "channel"), f);
        self.global.visit_mut(&join(prefix, "global"), f);
    }
}

/// The complete parameter set of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct DctNetParams<T = Tensor> {
    pub revin: RevinParams<T>,
    pub embed: PatchEmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> DctNetParams<T> {
    pub fn try_map_named<U, E>(
        &self,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<DctNetParams<U>, E> {
        Ok(DctNetParams {
            revin: self.revin.try_map_named("revin", f)?,
            embed: self.embed.try_map_named("embed", f)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map_named(&format!("blocks.{i}"), f))
                .collect::<Result<_, E>>()?,
            head: self.head.try_map_named("head", f)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DctNetParams<U> {
        let mapped: Result<_, std::convert::Infallible> = self.try_map_named(&mut |_, t| Ok(f(t)));
        match mapped {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.revin.visit("revin", f);
        self.embed.visit("embed", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        self.revin.visit_mut("revin", f);
        self.embed.visit_mut("embed", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.head.visit_mut("head", f);
    }

    /// Leaves in registry order, paired with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name, t)));
        out
    }
}

impl DctNetParams<Tensor> {
    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn uniform(shape: [usize; 2], fan_in: usize, seeds: &mut SeedStream) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = seeds.rng();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl TemporalParams {
    pub fn init(num_patches: usize, latent_dim: usize, seeds: &mut SeedStream) -> Self {
        TemporalParams {
            w_time: uniform([num_patches, num_patches], num_patches, seeds),
            norm_gain: Tensor::ones([latent_dim]),
            norm_bias: Tensor::zeros([latent_dim]),
        }
    }
}

impl AttentionParams {
    pub fn init(d: usize, seeds: &mut SeedStream) -> Self {
        AttentionParams {
            wq: uniform([d, d], d, seeds),
            bq: Tensor::zeros([d]),
            wk: uniform([d, d], d, seeds),
            bk: Tensor::zeros([d]),
            wv: uniform([d, d], d, seeds),
            bv: Tensor::zeros([d]),
            wo: uniform([d, d], d, seeds),
            bo: Tensor::zeros([d]),
        }
    }
}

impl AttentionBlockParams {
    pub fn init(d: usize, seeds: &mut SeedStream) -> Self {
        AttentionBlockParams {
            attn: AttentionParams::init(d, seeds),
            norm_gain: Tensor::ones([d]),
            norm_bias: Tensor::zeros([d]),
        }
    }
}

impl BlockParams {
    pub fn init(num_patches: usize, latent_dim: usize, seeds: &mut SeedStream) -> Self {
        BlockParams {
            temporal: TemporalParams::init(num_patches, latent_dim, seeds),
            channel: AttentionBlockParams::init(latent_dim, seeds),
            global: AttentionBlockParams::init(latent_dim, seeds),
        }
    }
}

impl HeadParams {
    pub fn init(num_patches: usize, latent_dim: usize, pred_len: usize, seeds: &mut SeedStream) -> Self {
        let fan_in = num_patches * latent_dim;
        HeadParams {
            weight: uniform([fan_in, pred_len], fan_in, seeds),
            bias: Tensor::zeros([pred_len]),
        }
    }
}
