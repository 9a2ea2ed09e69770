//! Global inter-patch self-attention: within each (instance, channel) every
//! patch attends to every other patch of the window. No causal mask.

use crate::engine::attention::attention_residual_norm;
use crate::engine::{Attention, Dropout, Graph, Var};
use crate::error::{Error, Result};
use crate::params::AttentionBlockParams;

/// `layer_norm(dropout(MHA(h)) + h)` over the patch axis of
/// `h_fused: [B, C, N, D]`. Returns `h_fused` itself when `disabled`, with
/// no attention weights.
pub fn global_patch_attention(
    g: &mut Graph,
    h_fused: Var,
    p: &AttentionBlockParams<Var>,
    heads: usize,
    norm_eps: f64,
    dropout: &mut Dropout,
    disabled: bool,
) -> Result<(Var, Option<Var>)> {
    if disabled {
        return Ok((h_fused, None));
    }
    if g.shape(h_fused).len() != 4 {
        return Err(Error::Contract(format!(
            "global attention expects [B, C, N, D], got {:?}",
            g.shape(h_fused)
        )));
    }
    let Attention { output, weights } =
        attention_residual_norm(g, h_fused, h_fused, p, heads, norm_eps, dropout)?;
    Ok((output, Some(weights)))
}
