//! Reversible instance normalisation.
//!
//! Each instance's channels are standardised over the time axis, then passed
//! through a learnable per-channel affine. The statistics are kept so the
//! forecast can be mapped back to the input scale.

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
pub use crate::params::RevinParams;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Smallest |gamma| for which the affine is treated as invertible.
pub const MIN_ABS_GAMMA: f64 = 1e-12;

/// Per-instance statistics captured by [`normalize`], both `[B, 1, C]`.
#[derive(Clone, Copy, Debug)]
pub struct RevinState {
    pub mean: Var,
    /// `sqrt(var + eps)`, strictly positive.
    pub std: Var,
}

impl RevinParams {
    /// gamma = 1, beta = 0.
    pub fn identity(channels: usize) -> Self {
        RevinParams {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
        }
    }
}

fn check_input(g: &Graph, x: Var, p: &RevinParams<Var>, op: &'static str) -> Result<()> {
    let xs = g.shape(x);
    let c = g.shape(p.gamma);
    if xs.len() != 3 || c.len() != 1 || xs[2] != c[0] || g.shape(p.beta) != c {
        return Err(Error::Shape {
            op,
            lhs: xs.to_vec(),
            rhs: c.to_vec(),
        });
    }
    Ok(())
}

/// Standardises `x: [B, L, C]` per (instance, channel) over L with biased
/// variance, then applies `gamma`/`beta`.
pub fn normalize(
    g: &mut Graph,
    x: Var,
    p: &RevinParams<Var>,
    eps: f64,
) -> Result<(Var, RevinState)> {
    check_input(g, x, p, "revin normalize")?;
    if eps <= 0.0 {
        return Err(Error::Param(format!("revin eps must be > 0, got {eps}")));
    }
    let len = g.shape(x)[1] as f64;
    let total = g.sum_axes(x, &[1])?;
    let mean = g.scale(total, 1.0 / len);
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered);
    let sq_total = g.sum_axes(sq, &[1])?;
    let var = g.scale(sq_total, 1.0 / len);
    let var = g.add_scalar(var, eps);
    let std = g.sqrt(var)?;
    let z = g.div(centered, std)?;
    let z = g.mul(z, p.gamma)?;
    let y = g.add(z, p.beta)?;
    Ok((y, RevinState { mean, std }))
}

/// Inverts the affine chain of [`normalize`]: `((y - beta) / gamma) * std + mean`.
pub fn denormalize(
    g: &mut Graph,
    y: Var,
    p: &RevinParams<Var>,
    state: &RevinState,
) -> Result<Var> {
    check_input(g, y, p, "revin denormalize")?;
    if let Some((c, v)) = g
        .value(p.gamma)
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| v.abs() < MIN_ABS_GAMMA)
    {
        return Err(Error::Singular(format!(
            "revin gamma[{c}] = {v} cannot be inverted"
        )));
    }
    let (b, c) = (g.shape(y)[0], g.shape(y)[2]);
    if g.shape(state.mean) != [b, 1, c] {
        return Err(Error::Shape {
            op: "revin denormalize state",
            lhs: g.shape(y).to_vec(),
            rhs: g.shape(state.mean).to_vec(),
        });
    }
    let shifted = g.sub(y, p.beta)?;
    let unscaled = g.div(shifted, p.gamma)?;
    let rescaled = g.mul(unscaled, state.std)?;
    g.add(rescaled, state.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(g: &mut Graph, p: &RevinParams) -> RevinParams<Var> {
        p.map(|t| g.constant(t.clone()))
    }

    fn series(values: &[f64]) -> Tensor {
        Tensor::new([1, values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut g = Graph::new();
        let p = bind(&mut g, &RevinParams::identity(1));
        let x = g.constant(series(&[5.0, 5.0, 5.0]));
        let (y, _) = normalize(&mut g, x, &p, DEFAULT_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardises_with_population_std() {
        let mut g = Graph::new();
        let p = bind(&mut g, &RevinParams::identity(1));
        let x = g.constant(series(&[1.0, 2.0, 3.0]));
        let (y, _) = normalize(&mut g, x, &p, 1e-12).unwrap();
        let z = (1.5f64).sqrt();
        let v = g.value(y).data();
        assert!((v[0] + z).abs() < 1e-9 && v[1].abs() < 1e-12 && (v[2] - z).abs() < 1e-9);

        let affine = RevinParams {
            gamma: Tensor::full([1], 2.0),
            beta: Tensor::full([1], 1.0),
        };
        let p = bind(&mut g, &affine);
        let (y, _) = normalize(&mut g, x, &p, 1e-12).unwrap();
        let v = g.value(y).data();
        // 2 * [-1.2247, 0, 1.2247] + 1
        assert!((v[0] - (1.0 - 2.0 * z)).abs() < 1e-9);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - (1.0 + 2.0 * z)).abs() < 1e-9);
    }

    #[test]
    fn beta_denormalises_to_stored_mean() {
        let mut g = Graph::new();
        let rp = RevinParams {
            gamma: Tensor::new([2], vec![1.5, -0.5]).unwrap(),
            beta: Tensor::new([2], vec![0.25, 2.0]).unwrap(),
        };
        let p = bind(&mut g, &rp);
        let x = g.constant(Tensor::from_fn([1, 4, 2], |i| (i[1] * (i[2] + 1)) as f64));
        let (_, state) = normalize(&mut g, x, &p, DEFAULT_EPS).unwrap();
        let y = g.constant(Tensor::from_fn([1, 3, 2], |i| rp.beta.data()[i[2]]));
        let back = denormalize(&mut g, y, &p, &state).unwrap();
        let mean = g.value(state.mean).data().to_vec();
        for t in 0..3 {
            for c in 0..2 {
                assert!((g.value(back).get(&[0, t, c]) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gamma_is_singular() {
        let mut g = Graph::new();
        let rp = RevinParams {
            gamma: Tensor::new([2], vec![1.0, 0.0]).unwrap(),
            beta: Tensor::zeros([2]),
        };
        let p = bind(&mut g, &rp);
        let x = g.constant(Tensor::from_fn([1, 3, 2], |i| i[1] as f64));
        let (y, state) = normalize(&mut g, x, &p, DEFAULT_EPS).unwrap();
        assert!(matches!(denormalize(&mut g, y, &p, &state), Err(Error::Singular(_))));
    }

    #[test]
    fn channel_count_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let p = bind(&mut g, &RevinParams::identity(3));
        let x = g.constant(Tensor::zeros([1, 4, 2]));
        assert!(matches!(normalize(&mut g, x, &p, DEFAULT_EPS), Err(Error::Shape { .. })));
    }
}
