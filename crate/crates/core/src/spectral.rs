//! Frequency-domain stationarity correction.
//!
//! The clamped autocorrelation of the prediction features is compared with
//! that of the input patch embedding, and the features are rescaled by
//!
//! ```text
//! alpha = sqrt( sum(S_pred * S_input) / (sum(S_input^2) + eps) )
//! ```
//!
//! where the sums run over the patch and latent axes of each
//! (instance, channel), or over everything in [`ReductionScope::GlobalScalar`].
//! Autocorrelations are taken along the patch axis.

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Patch axis of a `[B, C, N, D]` feature tensor.
pub const PATCH_AXIS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionScope {
    /// One factor per (instance, channel).
    #[default]
    PerBatchChannel,
    /// One factor for the whole batch.
    GlobalScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Added to the denominator of the factor.
    pub eps: f64,
    pub scope: ReductionScope,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            eps: 1e-8,
            scope: ReductionScope::PerBatchChannel,
        }
    }
}

impl CorrectionConfig {
    fn reduce_axes(&self) -> &'static [usize] {
        match self.scope {
            ReductionScope::PerBatchChannel => &[2, 3],
            ReductionScope::GlobalScalar => &[0, 1, 2, 3],
        }
    }

    /// Shape of alpha for features of shape `[B, C, N, D]`.
    pub fn alpha_shape(&self, feature_shape: &[usize]) -> Vec<usize> {
        match self.scope {
            ReductionScope::PerBatchChannel => vec![feature_shape[0], feature_shape[1], 1, 1],
            ReductionScope::GlobalScalar => vec![1, 1, 1, 1],
        }
    }
}

/// Tape handles produced by [`apply_correction_var`].
#[derive(Clone, Copy, Debug)]
pub struct CorrectionVars {
    pub output: Var,
    /// `None` when the correction is disabled.
    pub alpha: Option<Var>,
    pub pred_autocorr: Option<Var>,
    pub input_autocorr: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDiagnostics {
    /// `[B, C, 1, 1]` or `[1, 1, 1, 1]` depending on the scope; all ones
    /// when the correction is disabled.
    pub alpha: Tensor,
    pub pred_autocorr: Option<Tensor>,
    pub input_autocorr: Option<Tensor>,
}

impl SpectralDiagnostics {
    pub fn from_vars(g: &Graph, vars: &CorrectionVars, alpha_shape: Vec<usize>) -> Self {
        SpectralDiagnostics {
            alpha: vars
                .alpha
                .map_or_else(|| Tensor::ones(alpha_shape), |a| g.value(a).clone()),
            pred_autocorr: vars.pred_autocorr.map(|v| g.value(v).clone()),
            input_autocorr: vars.input_autocorr.map(|v| g.value(v).clone()),
        }
    }

    pub fn mean_alpha(&self) -> f64 {
        self.alpha.sum() / self.alpha.numel() as f64
    }
}

fn check_features(g: &Graph, h: Var, x: Var) -> Result<()> {
    if g.shape(h).len() != 4 || g.shape(h) != g.shape(x) {
        return Err(Error::Shape {
            op: "spectral correction",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(x).to_vec(),
        });
    }
    Ok(())
}

/// Clamped autocorrelation of `[B, C, N, D]` features along the patch axis.
pub fn power_autocorrelation_var(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).len() != 4 {
        return Err(Error::Contract(format!(
            "autocorrelation expects [B, C, N, D], got {:?}",
            g.shape(x)
        )));
    }
    g.power_autocorr(x, PATCH_AXIS)
}

/// Returns `(alpha, S_pred, S_input)`.
pub fn correction_factor_var(
    g: &mut Graph,
    h_global: Var,
    x_patch: Var,
    cfg: &CorrectionConfig,
) -> Result<(Var, Var, Var)> {
    check_features(g, h_global, x_patch)?;
    if !(cfg.eps.is_finite() && cfg.eps > 0.0) {
        return Err(Error::Param(format!("correction eps must be > 0, got {}", cfg.eps)));
    }
    let s_pred = power_autocorrelation_var(g, h_global)?;
    let s_input = power_autocorrelation_var(g, x_patch)?;
    let cross = g.mul(s_pred, s_input)?;
    let num = g.sum_axes(cross, cfg.reduce_axes())?;
    let self_energy = g.square(s_input);
    let den = g.sum_axes(self_energy, cfg.reduce_axes())?;
    let den = g.add_scalar(den, cfg.eps);
    let ratio = g.div(num, den)?;
    let alpha = g.sqrt(ratio)?;
    Ok((alpha, s_pred, s_input))
}

/// `h_global ⊙ alpha` when `enabled`; otherwise `h_global` unchanged.
pub fn apply_correction_var(
    g: &mut Graph,
    h_global: Var,
    x_patch: Var,
    cfg: &CorrectionConfig,
    enabled: bool,
) -> Result<CorrectionVars> {
    check_features(g, h_global, x_patch)?;
    if !enabled {
        return Ok(CorrectionVars {
            output: h_global,
            alpha: None,
            pred_autocorr: None,
            input_autocorr: None,
        });
    }
    let (alpha, s_pred, s_input) = correction_factor_var(g, h_global, x_patch, cfg)?;
    let output = g.mul(h_global, alpha)?;
    Ok(CorrectionVars {
        output,
        alpha: Some(alpha),
        pred_autocorr: Some(s_pred),
        input_autocorr: Some(s_input),
    })
}

pub fn power_autocorrelation(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = power_autocorrelation_var(&mut g, xv)?;
    Ok(g.value(s).clone())
}

pub fn correction_factor(h_global: &Tensor, x_patch: &Tensor, cfg: &CorrectionConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (h, x) = (g.constant(h_global.clone()), g.constant(x_patch.clone()));
    let (alpha, _, _) = correction_factor_var(&mut g, h, x, cfg)?;
    Ok(g.value(alpha).clone())
}

pub fn apply_correction(
    h_global: &Tensor,
    x_patch: &Tensor,
    cfg: &CorrectionConfig,
    enabled: bool,
) -> Result<(Tensor, SpectralDiagnostics)> {
    let mut g = Graph::new();
    let (h, x) = (g.constant(h_global.clone()), g.constant(x_patch.clone()));
    let vars = apply_correction_var(&mut g, h, x, cfg, enabled)?;
    let diag = SpectralDiagnostics::from_vars(&g, &vars, cfg.alpha_shape(h_global.shape()));
    Ok((g.value(vars.output).clone(), diag))
}
