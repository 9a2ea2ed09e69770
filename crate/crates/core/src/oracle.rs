//! Scalar reference implementations used as test oracles. They use plain
//! loops over nested vectors and never touch the tape.

use crate::engine::Tensor;
use crate::params::AttentionParams;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
        .collect()
}

fn row_times(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    (0..n)
        .map(|j| (0..k).map(|i| x[i] * w.get(&[i, j])).sum::<f64>() + b.data()[j])
        .collect()
}

/// Multi-head self-attention over `tokens` (each of length D).
pub fn attention(tokens: &[Vec<f64>], p: &AttentionParams, heads: usize) -> Vec<Vec<f64>> {
    let d = tokens[0].len();
    let dh = d / heads;
    let q: Vec<_> = tokens.iter().map(|t| row_times(t, &p.wq, &p.bq)).collect();
    let k: Vec<_> = tokens.iter().map(|t| row_times(t, &p.wk, &p.bk)).collect();
    let v: Vec<_> = tokens.iter().map(|t| row_times(t, &p.wv, &p.bv)).collect();
    let s = tokens.len();
    let mut concat = vec![vec![0.0; d]; s];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..s {
                for (c, col) in r.clone().enumerate() {
                    concat[i][h * dh + c] += e[j] / total * v[j][col];
                }
            }
        }
    }
    concat.iter().map(|row| row_times(row, &p.wo, &p.bo)).collect()
}

/// Circular autocorrelation `sum_m x[m] x[m-k] / sqrt(n)`, clamped at zero.
pub fn clamped_autocorr(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let s: f64 = (0..n).map(|m| x[m] * x[(m + n - k) % n]).sum();
            (s / (n as f64).sqrt()).max(0.0)
        })
        .collect()
}
