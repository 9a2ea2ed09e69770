//! The full forecaster: instance normalisation, patch embedding, a stack of
//! (dual-branch, global attention) blocks, spectral correction, a shared
//! linear head and denormalisation.

use crate::config::ModelConfig;
use crate::dual_branch::{fuse_branches, BlockSettings};
use crate::engine::{Dropout, Graph, SeedStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::global_fusion::global_patch_attention;
use crate::params::{BlockParams, DctNetParams, HeadParams, PatchEmbedParams, RevinParams};
use crate::patch::{embed_patches, segment_patches, PatchConfig};
use crate::revin;
use crate::spectral::{apply_correction_var, CorrectionVars, SpectralDiagnostics};

/// Forecast in the scale of the input window.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    /// `[B, T, C]`
    pub values: Tensor,
    pub diagnostics: SpectralDiagnostics,
}

/// Deterministic initialisation from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<DctNetParams> {
    cfg.validate()?;
    let n = cfg.num_patches();
    let d = cfg.latent_dim;
    let mut seeds = SeedStream::new(seed);
    let embed = PatchEmbedParams::init(cfg.patch_len, d, n, &mut seeds);
    let blocks = (0..cfg.depth)
        .map(|_| BlockParams::init(n, d, &mut seeds))
        .collect();
    let head = HeadParams::init(n, d, cfg.pred_len, &mut seeds);
    Ok(DctNetParams {
        revin: RevinParams::identity(cfg.channels),
        embed,
        blocks,
        head,
    })
}

/// Shape of every parameter implied by `cfg`, in registry order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (n, d, c, p, t) = (
        cfg.num_patches(),
        cfg.latent_dim,
        cfg.channels,
        cfg.patch_len,
        cfg.pred_len,
    );
    let attn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        for w in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
            let shape = if w.starts_with('w') { vec![d, d] } else { vec![d] };
            out.push((format!("{prefix}.attn.{w}"), shape));
        }
        out.push((format!("{prefix}.norm_gain"), vec![d]));
        out.push((format!("{prefix}.norm_bias"), vec![d]));
    };
    let mut out = vec![
        ("revin.gamma".to_string(), vec![c]),
        ("revin.beta".to_string(), vec![c]),
        ("embed.weight".to_string(), vec![p, d]),
        ("embed.bias".to_string(), vec![d]),
        ("embed.pos".to_string(), vec![n, d]),
    ];
    for i in 0..cfg.depth {
        out.push((format!("blocks.{i}.temporal.w_time"), vec![n, n]));
        out.push((format!("blocks.{i}.temporal.norm_gain"), vec![d]));
        out.push((format!("blocks.{i}.temporal.norm_bias"), vec![d]));
        attn(&format!("blocks.{i}.channel"), &mut out);
        attn(&format!("blocks.{i}.global"), &mut out);
    }
    out.push(("head.weight".to_string(), vec![n * d, t]));
    out.push(("head.bias".to_string(), vec![t]));
    out
}

/// Checks that `params` has exactly the tensors `cfg` implies.
pub fn check_params(cfg: &ModelConfig, params: &DctNetParams) -> Result<()> {
    let expected = expected_shapes(cfg);
    let actual = params.named();
    if expected.len() != actual.len() {
        return Err(Error::Param(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            actual.len()
        )));
    }
    for ((want_name, want_shape), (name, tensor)) in expected.iter().zip(&actual) {
        if want_name != name || want_shape.as_slice() != tensor.shape() {
            return Err(Error::Param(format!(
                "parameter {name} has shape {:?}, config implies {want_name} {want_shape:?}",
                tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Places every parameter on the tape, as trainable leaves or constants.
pub fn bind_params(g: &mut Graph, params: &DctNetParams, trainable: bool) -> DctNetParams<Var> {
    params.map(|t| g.leaf(t.clone(), trainable))
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, T, C]` in the input scale.
    pub output: Var,
    pub correction: CorrectionVars,
    /// Channel-branch attention weights of each block that ran.
    pub channel_weights: Vec<Var>,
    /// Global attention weights of each block that ran.
    pub global_weights: Vec<Var>,
}

fn check_input(cfg: &ModelConfig, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[1] != cfg.seq_len || s[2] != cfg.channels || s[0] == 0 {
        return Err(Error::Contract(format!(
            "input shape {s:?} does not match [B, {}, {}]",
            cfg.seq_len, cfg.channels
        )));
    }
    x.ensure_finite("model input")
}

/// Records the forward pass of `x: [B, L, C]` on `g`.
pub fn forward_graph(
    g: &mut Graph,
    x: Var,
    p: &DctNetParams<Var>,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<ForwardVars> {
    check_input(cfg, g.value(x))?;
    let (x_norm, state) = revin::normalize(g, x, &p.revin, cfg.revin_eps)?;
    let patch_cfg = PatchConfig {
        patch_len: cfg.patch_len,
        stride: cfg.stride,
        latent_dim: cfg.latent_dim,
    };
    let patches = segment_patches(g, x_norm, &patch_cfg)?;
    let x_patch = embed_patches(g, patches, &p.embed)?;

    let settings = BlockSettings {
        heads: cfg.heads,
        norm_eps: cfg.norm_eps,
        fusion_mode: cfg.fusion_mode,
    };
    let mut h = x_patch;
    let mut channel_weights = Vec::new();
    let mut global_weights = Vec::new();
    for block in &p.blocks {
        let fused = fuse_branches(g, h, block, &settings, dropout, cfg.disable_dbct)?;
        channel_weights.extend(fused.channel_weights);
        let (global, weights) = global_patch_attention(
            g,
            fused.output,
            &block.global,
            cfg.heads,
            cfg.norm_eps,
            dropout,
            cfg.disable_gpaf,
        )?;
        global_weights.extend(weights);
        h = global;
    }
    let correction = apply_correction_var(g, h, x_patch, &cfg.correction, !cfg.disable_fsc)?;

    let shape = g.shape(correction.output).to_vec();
    let (b, c, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = g.reshape(correction.output, &[b, c, n * d])?;
    let projected = g.matmul(flat, p.head.weight)?;
    let projected = g.add(projected, p.head.bias)?;
    let y_norm = g.permute(projected, &[0, 2, 1])?;
    let output = revin::denormalize(g, y_norm, &p.revin, &state)?;
    Ok(ForwardVars {
        output,
        correction,
        channel_weights,
        global_weights,
    })
}

/// Runs the model on `x: [B, L, C]`. `dropout_seed` switches on training
/// mode with masks drawn from that seed.
pub fn forward(
    x: &Tensor,
    params: &DctNetParams,
    cfg: &ModelConfig,
    dropout_seed: Option<u64>,
) -> Result<Forecast> {
    check_input(cfg, x)?;
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, false);
    let xv = g.constant(x.clone());
    let mut dropout = match dropout_seed {
        Some(seed) => Dropout::train(cfg.dropout, seed),
        None => Dropout::eval(),
    };
    let vars = forward_graph(&mut g, xv, &p, cfg, &mut dropout)?;
    let diagnostics = SpectralDiagnostics::from_vars(
        &g,
        &vars.correction,
        cfg.correction.alpha_shape(&[x.shape()[0], cfg.channels]),
    );
    Ok(Forecast {
        values: g.value(vars.output).clone(),
        diagnostics,
    })
}

/// Configuration and parameters together.
#[derive(Clone, Debug, PartialEq)]
pub struct DctNet {
    pub config: ModelConfig,
    pub params: DctNetParams,
}

impl DctNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config, config.seed)?;
        Ok(DctNet { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: DctNetParams) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(DctNet { config, params })
    }

    /// Eval-mode forecast.
    pub fn predict(&self, x: &Tensor) -> Result<Forecast> {
        forward(x, &self.params, &self.config, None)
    }
}
