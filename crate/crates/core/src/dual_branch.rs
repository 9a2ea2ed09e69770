//! Dual-branch channel-temporal modelling.
//!
//! The temporal branch mixes patches of one channel with a linear map over
//! the patch axis; the channel branch lets the channels of one patch attend
//! to each other. Under [`FusionMode::ResidualSubstitution`] the channel
//! branch attends over the patch embedding but adds the temporal output as
//! its residual, which is where the two branches meet.

use crate::config::FusionMode;
use crate::engine::attention::attention_residual_norm;
use crate::engine::{Attention, Dropout, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{AttentionBlockParams, BlockParams, TemporalParams};

/// `layer_norm(gelu(x ·_N W_time) + x)` where `·_N` contracts the patch
/// axis: `out[.., n, d] = sum_m x[.., m, d] * W_time[m, n]`.
pub fn temporal_branch_forward(
    g: &mut Graph,
    x_patch: Var,
    p: &TemporalParams<Var>,
    norm_eps: f64,
) -> Result<Var> {
    let xs = g.shape(x_patch).to_vec();
    if xs.len() < 2 {
        return Err(Error::Contract(format!("temporal branch input {xs:?} has rank < 2")));
    }
    let n = xs[xs.len() - 2];
    if g.shape(p.w_time) != [n, n] {
        return Err(Error::Shape {
            op: "temporal branch W_time",
            lhs: xs,
            rhs: g.shape(p.w_time).to_vec(),
        });
    }
    let wt = g.transpose(p.w_time, 0, 1)?;
    let mixed = g.matmul(wt, x_patch)?;
    let act = g.gelu(mixed);
    let sum = g.add(act, x_patch)?;
    g.layer_norm(sum, p.norm_gain, p.norm_bias, norm_eps)
}

/// Attention across channels for every (instance, patch), with
/// `residual_in` added before the norm. Returns the `[B, C, N, D]` output and
/// the `[B, N, heads, C, C]` attention weights.
pub fn channel_branch_forward(
    g: &mut Graph,
    x_patch: Var,
    residual_in: Var,
    p: &AttentionBlockParams<Var>,
    heads: usize,
    norm_eps: f64,
    dropout: &mut Dropout,
) -> Result<Attention> {
    if g.shape(x_patch).len() != 4 {
        return Err(Error::Contract(format!(
            "channel branch expects [B, C, N, D], got {:?}",
            g.shape(x_patch)
        )));
    }
    let tokens = g.permute(x_patch, &[0, 2, 1, 3])?;
    let residual = g.permute(residual_in, &[0, 2, 1, 3])?;
    let att = attention_residual_norm(g, tokens, residual, p, heads, norm_eps, dropout)?;
    let output = g.permute(att.output, &[0, 2, 1, 3])?;
    Ok(Attention {
        output,
        weights: att.weights,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub output: Var,
    /// `None` when the block is bypassed.
    pub channel_weights: Option<Var>,
}

/// Settings shared by the attention stages of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockSettings {
    pub heads: usize,
    pub norm_eps: f64,
    pub fusion_mode: FusionMode,
}

/// Produces `H_fused`. With `disabled` the block is bypassed and the input
/// is returned unchanged.
pub fn fuse_branches(
    g: &mut Graph,
    x_patch: Var,
    block: &BlockParams<Var>,
    settings: &BlockSettings,
    dropout: &mut Dropout,
    disabled: bool,
) -> Result<Fused> {
    if disabled {
        return Ok(Fused {
            output: x_patch,
            channel_weights: None,
        });
    }
    let h_time = temporal_branch_forward(g, x_patch, &block.temporal, settings.norm_eps)?;
    match settings.fusion_mode {
        FusionMode::ResidualSubstitution => {
            let att = channel_branch_forward(
                g,
                x_patch,
                h_time,
                &block.channel,
                settings.heads,
                settings.norm_eps,
                dropout,
            )?;
            Ok(Fused {
                output: att.output,
                channel_weights: Some(att.weights),
            })
        }
        FusionMode::Additive => {
            let att = channel_branch_forward(
                g,
                x_patch,
                x_patch,
                &block.channel,
                settings.heads,
                settings.norm_eps,
                dropout,
            )?;
            Ok(Fused {
                output: g.add(h_time, att.output)?,
                channel_weights: Some(att.weights),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{SeedStream, Tensor};
    use crate::oracle;
    use crate::params::AttentionParams;

    fn temporal(w: Tensor, d: usize) -> TemporalParams {
        TemporalParams {
            w_time: w,
            norm_gain: Tensor::ones([d]),
            norm_bias: Tensor::zeros([d]),
        }
    }

    fn block_params(d: usize, seed: u64) -> AttentionBlockParams {
        let mut seeds = SeedStream::new(seed);
        AttentionBlockParams::init(d, &mut seeds)
    }

    #[test]
    fn zero_w_time_collapses_to_layer_norm() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn([1, 2, 3, 4], |i| (i[1] * 7 + i[2] * 3 + i[3] * i[3]) as f64 * 0.1);
        let x = g.constant(xt.clone());
        let p = temporal(Tensor::zeros([3, 3]), 4).map(|t| g.constant(t.clone()));
        let h = temporal_branch_forward(&mut g, x, &p, 1e-5).unwrap();
        for (row_out, row_in) in g.value(h).data().chunks(4).zip(xt.data().chunks(4)) {
            let want = oracle::layer_norm_row(row_in, &[1.0; 4], &[0.0; 4], 1e-5);
            for (a, b) in row_out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_w_time_doubles_large_inputs_before_norm() {
        // With W_time = I and large positive x, gelu(x) ≈ x so the pre-norm
        // sum is 2x and the norm output equals layer_norm(x).
        let mut g = Graph::new();
        let xt = Tensor::from_fn([1, 1, 2, 3], |i| 20.0 + (i[2] * 3 + i[3]) as f64);
        let x = g.constant(xt.clone());
        let eye = Tensor::from_fn([2, 2], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let p = temporal(eye, 3).map(|t| g.constant(t.clone()));
        let h = temporal_branch_forward(&mut g, x, &p, 1e-12).unwrap();
        for (row_out, row_in) in g.value(h).data().chunks(3).zip(xt.data().chunks(3)) {
            let doubled: Vec<f64> = row_in.iter().map(|v| 2.0 * v).collect();
            let want = oracle::layer_norm_row(&doubled, &[1.0; 3], &[0.0; 3], 1e-12);
            for (a, b) in row_out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn swap_matrix_hand_trace() {
        // B = C = 1, N = 2, D = 2; W_time swaps the two patches.
        let xt = Tensor::new([1, 1, 2, 2], vec![0.3, -1.2, 0.8, 0.5]).unwrap();
        let swap = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let p = temporal(swap, 2).map(|t| g.constant(t.clone()));
        let h = temporal_branch_forward(&mut g, x, &p, 1e-5).unwrap();
        let rows = [[0.3, -1.2], [0.8, 0.5]];
        for n in 0..2 {
            let other = rows[1 - n];
            let pre: Vec<f64> = (0..2).map(|d| oracle::gelu(other[d]) + rows[n][d]).collect();
            let want = oracle::layer_norm_row(&pre, &[1.0; 2], &[0.0; 2], 1e-5);
            for d in 0..2 {
                assert!((g.value(h).get(&[0, 0, n, d]) - want[d]).abs() < 1e-12);
            }
        }

        // D = 1 collapses every row to the norm bias.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 2, 1], vec![0.3, 0.8]).unwrap());
        let mut tp = temporal(Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(), 1);
        tp.norm_bias = Tensor::full([1], 0.7);
        let p = tp.map(|t| g.constant(t.clone()));
        let h = temporal_branch_forward(&mut g, x, &p, 1e-5).unwrap();
        assert_eq!(g.value(h).data(), &[0.7, 0.7]);
    }

    #[test]
    fn temporal_branch_is_channel_independent() {
        let mut seeds = SeedStream::new(3);
        let tp = TemporalParams::init(3, 4, &mut seeds);
        let base = Tensor::from_fn([1, 2, 3, 4], |i| ((i[1] + 1) * (i[2] + 2) + i[3]) as f64 * 0.3);
        let mut bumped = base.clone();
        bumped.set(&[0, 1, 2, 3], 9.0);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let p = tp.map(|t| g.constant(t.clone()));
            let x = g.constant(x.clone());
            let h = temporal_branch_forward(&mut g, x, &p, 1e-5).unwrap();
            g.value(h).clone()
        };
        let (a, b) = (run(&base), run(&bumped));
        assert_eq!(&a.data()[..12], &b.data()[..12]);
        assert_ne!(&a.data()[12..], &b.data()[12..]);
    }

    #[test]
    fn channel_branch_matches_attention_oracle() {
        // C = 2 channels as tokens, D = 2, one patch, eval mode.
        let p = AttentionBlockParams {
            attn: AttentionParams {
                wq: Tensor::new([2, 2], vec![1.0, 0.5, -0.3, 2.0]).unwrap(),
                bq: Tensor::new([2], vec![0.1, 0.0]).unwrap(),
                wk: Tensor::new([2, 2], vec![0.2, -1.0, 1.5, 0.4]).unwrap(),
                bk: Tensor::zeros([2]),
                wv: Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                bv: Tensor::new([2], vec![0.0, -0.5]).unwrap(),
                wo: Tensor::new([2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
                bo: Tensor::zeros([2]),
            },
            norm_gain: Tensor::new([2], vec![1.5, 0.5]).unwrap(),
            norm_bias: Tensor::new([2], vec![0.1, -0.2]).unwrap(),
        };
        let tokens = vec![vec![0.4, -0.6], vec![1.1, 0.9]];
        let residual = vec![vec![2.0, 1.0], vec![-1.0, 0.5]];
        let x = Tensor::new([1, 2, 1, 2], tokens.concat()).unwrap();
        let r = Tensor::new([1, 2, 1, 2], residual.concat()).unwrap();

        let mut g = Graph::new();
        let pv = p.map(|t| g.constant(t.clone()));
        let (xv, rv) = (g.constant(x), g.constant(r));
        let att = channel_branch_forward(&mut g, xv, rv, &pv, 1, 1e-5, &mut Dropout::eval()).unwrap();

        let mixed = oracle::attention(&tokens, &p.attn, 1);
        for c in 0..2 {
            let pre: Vec<f64> = (0..2).map(|d| mixed[c][d] + residual[c][d]).collect();
            let want = oracle::layer_norm_row(&pre, p.norm_gain.data(), p.norm_bias.data(), 1e-5);
            for d in 0..2 {
                let got = g.value(att.output).get(&[0, c, 0, d]);
                assert!((got - want[d]).abs() < 1e-12, "c={c} d={d}: {got} vs {}", want[d]);
            }
        }
    }

    #[test]
    fn channel_weights_are_row_stochastic_and_channels_couple() {
        let p = block_params(4, 11);
        let base = Tensor::from_fn([2, 3, 2, 4], |i| ((i[0] + 2 * i[1] + 3 * i[2] + i[3]) % 5) as f64 - 2.0);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let pv = p.map(|t| g.constant(t.clone()));
            let xv = g.constant(x.clone());
            let att = channel_branch_forward(&mut g, xv, xv, &pv, 2, 1e-5, &mut Dropout::eval()).unwrap();
            (g.value(att.output).clone(), g.value(att.weights).clone())
        };
        let (out, w) = run(&base);
        assert_eq!(w.shape(), &[2, 2, 2, 3, 3]);
        for row in w.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        let mut bumped = base.clone();
        bumped.set(&[0, 0, 0, 0], 5.0);
        let (out2, _) = run(&bumped);
        // Channel 1 of the same (instance, patch) sees the change.
        assert!((out.get(&[0, 1, 0, 0]) - out2.get(&[0, 1, 0, 0])).abs() > 1e-6);
    }

    #[test]
    fn identical_channels_stay_identical() {
        let p = block_params(4, 5);
        let x = Tensor::from_fn([1, 3, 2, 4], |i| (i[2] * 4 + i[3]) as f64 * 0.25);
        let mut g = Graph::new();
        let pv = p.map(|t| g.constant(t.clone()));
        let xv = g.constant(x);
        let att = channel_branch_forward(&mut g, xv, xv, &pv, 2, 1e-5, &mut Dropout::eval()).unwrap();
        let out = g.value(att.output);
        for c in 1..3 {
            for n in 0..2 {
                for d in 0..4 {
                    assert!((out.get(&[0, c, n, d]) - out.get(&[0, 0, n, d])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn disabled_fusion_is_exact_identity() {
        let mut seeds = SeedStream::new(1);
        let block = BlockParams::init(3, 4, &mut seeds);
        let mut g = Graph::new();
        let bv = block.map(|t| g.constant(t.clone()));
        let x = g.constant(Tensor::from_fn([1, 2, 3, 4], |i| i.iter().sum::<usize>() as f64));
        let settings = BlockSettings {
            heads: 2,
            norm_eps: 1e-5,
            fusion_mode: FusionMode::ResidualSubstitution,
        };
        let fused = fuse_branches(&mut g, x, &bv, &settings, &mut Dropout::train(0.5, 1), true).unwrap();
        assert_eq!(fused.output, x);
        assert!(fused.channel_weights.is_none());
    }

    #[test]
    fn zeroed_projections_reduce_to_nested_norms() {
        // W_time = 0 and all channel projections zero: the attention output
        // is zero, so H_fused = LN(0 + LN(x)) = LN(LN(x)).
        let d = 4;
        let mut seeds = SeedStream::new(2);
        let mut block = BlockParams::init(2, d, &mut seeds);
        block.temporal.w_time = Tensor::zeros([2, 2]);
        block.channel.attn = block.channel.attn.map(|t| Tensor::zeros(t.shape().to_vec()));
        let xt = Tensor::from_fn([1, 2, 2, d], |i| ((i[1] + 1) * (i[2] + 1) * (i[3] + 1)) as f64 * 0.2);
        let mut g = Graph::new();
        let bv = block.map(|t| g.constant(t.clone()));
        let x = g.constant(xt.clone());
        let settings = BlockSettings {
            heads: 2,
            norm_eps: 1e-5,
            fusion_mode: FusionMode::ResidualSubstitution,
        };
        let fused = fuse_branches(&mut g, x, &bv, &settings, &mut Dropout::eval(), false).unwrap();
        for (row_out, row_in) in g.value(fused.output).data().chunks(d).zip(xt.data().chunks(d)) {
            let inner = oracle::layer_norm_row(row_in, &[1.0; 4], &[0.0; 4], 1e-5);
            let want = oracle::layer_norm_row(&inner, &[1.0; 4], &[0.0; 4], 1e-5);
            for (a, b) in row_out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_channel_single_patch_scalar_trace() {
        // B = C = N = 1, D = 2: every stage evaluated by hand.
        let d = 2;
        let block = BlockParams {
            temporal: TemporalParams {
                w_time: Tensor::full([1, 1], 0.5),
                norm_gain: Tensor::new([2], vec![2.0, 1.0]).unwrap(),
                norm_bias: Tensor::new([2], vec![0.0, 0.3]).unwrap(),
            },
            channel: AttentionBlockParams {
                attn: AttentionParams {
                    wq: Tensor::zeros([2, 2]),
                    bq: Tensor::zeros([2]),
                    wk: Tensor::zeros([2, 2]),
                    bk: Tensor::zeros([2]),
                    wv: Tensor::new([2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap(),
                    bv: Tensor::zeros([2]),
                    wo: Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
                    bo: Tensor::new([2], vec![0.5, 0.0]).unwrap(),
                },
                norm_gain: Tensor::ones([2]),
                norm_bias: Tensor::zeros([2]),
            },
            global: AttentionBlockParams::init(d, &mut SeedStream::new(0)),
        };
        let x = [1.0, 3.0];
        let mut g = Graph::new();
        let bv = block.map(|t| g.constant(t.clone()));
        let xv = g.constant(Tensor::new([1, 1, 1, 2], x.to_vec()).unwrap());
        let settings = BlockSettings {
            heads: 1,
            norm_eps: 1e-5,
            fusion_mode: FusionMode::ResidualSubstitution,
        };
        let fused = fuse_branches(&mut g, xv, &bv, &settings, &mut Dropout::eval(), false).unwrap();

        let pre_t = [oracle::gelu(0.5 * x[0]) + x[0], oracle::gelu(0.5 * x[1]) + x[1]];
        let h_time = oracle::layer_norm_row(&pre_t, &[2.0, 1.0], &[0.0, 0.3], 1e-5);
        // One token: weight 1, value = [x0, -x1], output swaps then adds bo.
        let att = [-x[1] + 0.5, x[0]];
        let pre_c = [att[0] + h_time[0], att[1] + h_time[1]];
        let want = oracle::layer_norm_row(&pre_c, &[1.0; 2], &[0.0; 2], 1e-5);
        for j in 0..2 {
            assert!((g.value(fused.output).data()[j] - want[j]).abs() < 1e-12);
        }
    }
}
