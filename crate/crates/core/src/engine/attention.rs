//! Multi-head scaled dot-product self-attention.

use super::dropout::Dropout;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{AttentionBlockParams, AttentionParams};

/// Output of [`multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[..., S, D]`
    pub output: Var,
    /// Post-softmax weights, `[..., heads, S, S]`; each row sums to one.
    pub weights: Var,
}

/// Self-attention over the second-to-last axis of `x: [..., S, D]`.
///
/// Every leading axis is an independent batch. `dropout_p` applies to the
/// attention weights; the mask for training mode derives from `seed`.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams<Var>,
    heads: usize,
    dropout_p: f64,
    training: bool,
    seed: u64,
) -> Result<Attention> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::Contract(format!(
            "attention input needs rank >= 2, got {shape:?}"
        )));
    }
    let rank = shape.len();
    let (s, d) = (shape[rank - 2], shape[rank - 1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "latent dim {d} is not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;

    let project = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add(y, b)
    };
    // [..., S, D] -> [..., H, S, dh]
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let mut split_shape = shape[..rank - 1].to_vec();
        split_shape.extend([heads, head_dim]);
        let t = g.reshape(t, &split_shape)?;
        g.transpose(t, rank - 2, rank - 1)
    };

    let q = project(g, params.wq, params.bq)?;
    let q = split(g, q)?;
    let k = project(g, params.wk, params.bk)?;
    let k = split(g, k)?;
    let v = project(g, params.wv, params.bv)?;
    let v = split(g, v)?;

    let kt = g.transpose(k, rank - 1, rank)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = g.softmax_lastdim(scores)?;
    let attended = g.dropout(weights, dropout_p, training, seed)?;
    let ctx = g.matmul(attended, v)?;

    // [..., H, S, dh] -> [..., S, D]
    let ctx = g.transpose(ctx, rank - 2, rank - 1)?;
    let mut merged = shape[..rank - 2].to_vec();
    merged.extend([s, d]);
    let ctx = g.reshape(ctx, &merged)?;
    let out = g.matmul(ctx, params.wo)?;
    let output = g.add(out, params.bo)?;
    Ok(Attention { output, weights })
}

/// `layer_norm(dropout(MHA(tokens)) + residual)`, the post-norm residual
/// attention block. `tokens` and `residual` are `[..., S, D]`.
pub fn attention_residual_norm(
    g: &mut Graph,
    tokens: Var,
    residual: Var,
    p: &AttentionBlockParams<Var>,
    heads: usize,
    norm_eps: f64,
    dropout: &mut Dropout,
) -> Result<Attention> {
    if g.shape(tokens) != g.shape(residual) {
        return Err(Error::Shape {
            op: "attention residual",
            lhs: g.shape(tokens).to_vec(),
            rhs: g.shape(residual).to_vec(),
        });
    }
    let att = multi_head_attention(g, tokens, &p.attn, heads, 0.0, false, 0)?;
    let dropped = dropout.apply(g, att.output)?;
    let sum = g.add(dropped, residual)?;
    let output = g.layer_norm(sum, p.norm_gain, p.norm_bias, norm_eps)?;
    Ok(Attention {
        output,
        weights: att.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn eye(d: usize) -> Tensor {
        Tensor::from_fn([d, d], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    fn bind(g: &mut Graph, p: &AttentionParams<Tensor>) -> AttentionParams<Var> {
        p.map(|t| g.constant(t.clone()))
    }

    fn identity_params(d: usize) -> AttentionParams<Tensor> {
        AttentionParams {
            wq: eye(d),
            bq: Tensor::zeros([d]),
            wk: eye(d),
            bk: Tensor::zeros([d]),
            wv: eye(d),
            bv: Tensor::zeros([d]),
            wo: eye(d),
            bo: Tensor::zeros([d]),
        }
    }

    #[test]
    fn single_token_returns_projected_value() {
        let mut p = identity_params(2);
        p.wv = Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        p.bo = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let params = bind(&mut g, &p);
        let x = g.constant(Tensor::new([1, 2], vec![0.5, 2.0]).unwrap());
        let att = multi_head_attention(&mut g, x, &params, 2, 0.0, false, 0).unwrap();
        assert_eq!(g.value(att.output).data(), &[2.0, 5.0]);
        assert!(g.value(att.weights).data().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn sharp_scores_copy_the_other_token() {
        // Token 1 = [1, 0], token 2 = [0, 1]. The key projection swaps
        // coordinates, so token 1's query lines up with token 2's key.
        let mut p = identity_params(2);
        p.wq = Tensor::new([2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        p.wk = Tensor::new([2, 2], vec![0.0, 10.0, 10.0, 0.0]).unwrap();
        p.wv = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let params = bind(&mut g, &p);
        let x = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let att = multi_head_attention(&mut g, x, &params, 1, 0.0, false, 0).unwrap();
        // q1 = [10, 0]; k1 = [0, 10], k2 = [10, 0]; scores = [0, 100] / sqrt(2).
        let w = g.value(att.weights).data();
        let w12 = 1.0 / (1.0 + (-100.0 / 2f64.sqrt()).exp());
        assert!((w[1] - w12).abs() < 1e-15);
        // Output 1 ≈ value of token 2 = [3, 4].
        let out = g.value(att.output).data();
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_dim() {
        let p = identity_params(3);
        let mut g = Graph::new();
        let params = bind(&mut g, &p);
        let x = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(
            multi_head_attention(&mut g, x, &params, 2, 0.0, false, 0),
            Err(Error::Config(_))
        ));
    }
}
