use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::compute_num_patches;
use crate::spectral::CorrectionConfig;

/// How the temporal branch output reaches the fused representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The channel branch's residual carries the temporal branch output.
    #[default]
    ResidualSubstitution,
    /// Both branches keep the patch embedding as residual; outputs are summed.
    Additive,
}

/// Stages that can be bypassed for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Dual-branch channel-temporal block.
    Dbct,
    /// Global inter-patch attention.
    Gpaf,
    /// Frequency-domain stationarity correction.
    Fsc,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Dbct, Ablation::Gpaf, Ablation::Fsc];

    /// Row label used in ablation tables, e.g. `w/o-FSC`.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Dbct => "w/o-DBCT",
            Ablation::Gpaf => "w/o-GPAF",
            Ablation::Fsc => "w/o-FSC",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dbct" => Ok(Ablation::Dbct),
            "gpaf" => Ok(Ablation::Gpaf),
            "fsc" => Ok(Ablation::Fsc),
            other => Err(Error::Config(format!(
                "unknown ablation variant '{other}' (expected dbct, gpaf or fsc)"
            ))),
        }
    }
}

/// Every hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length L.
    pub seq_len: usize,
    /// Forecast horizon T.
    pub pred_len: usize,
    /// Number of channels C.
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    /// Latent dimension D.
    pub latent_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub revin_eps: f64,
    pub norm_eps: f64,
    /// Number of stacked (dual-branch, global-attention) block pairs.
    pub depth: usize,
    pub fusion_mode: FusionMode,
    pub correction: CorrectionConfig,
    pub disable_dbct: bool,
    pub disable_gpaf: bool,
    pub disable_fsc: bool,
    /// Initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 96,
            pred_len: 96,
            channels: 1,
            patch_len: 16,
            stride: 8,
            latent_dim: 64,
            heads: 4,
            dropout: 0.1,
            revin_eps: 1e-5,
            norm_eps: 1e-5,
            depth: 1,
            fusion_mode: FusionMode::default(),
            correction: CorrectionConfig::default(),
            disable_dbct: false,
            disable_gpaf: false,
            disable_fsc: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("seq_len", self.seq_len),
            ("pred_len", self.pred_len),
            ("channels", self.channels),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("depth", self.depth),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        compute_num_patches(self.seq_len, self.patch_len, self.stride)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        for (name, eps) in [
            ("revin_eps", self.revin_eps),
            ("norm_eps", self.norm_eps),
            ("correction.eps", self.correction.eps),
        ] {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {eps}")));
            }
        }
        Ok(())
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        (self.seq_len.saturating_sub(self.patch_len)) / self.stride.max(1) + 1
    }

    pub fn is_disabled(&self, stage: Ablation) -> bool {
        match stage {
            Ablation::Dbct => self.disable_dbct,
            Ablation::Gpaf => self.disable_gpaf,
            Ablation::Fsc => self.disable_fsc,
        }
    }

    /// The same configuration with `stage` bypassed. Parameter shapes do
    /// not change, so checkpoints stay interchangeable across variants.
    pub fn ablation_variant(&self, stage: Ablation) -> ModelConfig {
        let mut cfg = self.clone();
        match stage {
            Ablation::Dbct => cfg.disable_dbct = true,
            Ablation::Gpaf => cfg.disable_gpaf = true,
            Ablation::Fsc => cfg.disable_fsc = true,
        }
        cfg
    }
}
