//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to apply its adjoint. Nodes are only ever appended, so index order
//! is a topological order and `backward` simply walks the tape in reverse.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fft::{self, Direction, Lines};
use super::kernels::{
    aligned_strides, broadcast_shape, contiguous_strides, for_each_broadcast, gemm_acc,
    gemm_nt_acc, gemm_tn_acc, odometer,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    Sqrt,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Frames {
        x: Var,
        size: usize,
        step: usize,
    },
    PowerAutocorr {
        x: Var,
        axis: usize,
    },
    SumAxes {
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Unary { x, .. }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::Frames { x, .. }
            | Op::PowerAutocorr { x, .. }
            | Op::SumAxes { x } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape: records primitive applications and replays their
/// adjoints in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (erf-based) GELU of a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gauss_cdf(x)
}

/// Relative bound on the imaginary residue left after inverting a real
/// power spectrum.
const IMAG_RESIDUE_TOL: f64 = 1e-9;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
                let (x, y) = (av[ia], bv[ib]);
                out[i] = match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                };
            });
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Binary { kind, a, b }))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.binary(BinaryKind::Mul, x, x, "square")
            .expect("a shape always broadcasts with itself")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Scale(f) => v * f,
            UnaryKind::AddScalar(c) => v + c,
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Gelu => gelu_scalar(v),
        });
        self.push(value, Op::Unary { kind, x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(UnaryKind::Scale(factor), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Contract(format!("sqrt of negative value {v}")));
        }
        Ok(self.unary(UnaryKind::Sqrt, x))
    }

    /// `x · Φ(x)` with Φ the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    // ---- normalisation ----------------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| {
            Error::Contract("softmax_lastdim needs a tensor of rank >= 1".into())
        })?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }))
    }

    /// Layer normalisation over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| {
            Error::Contract("layer_norm needs a tensor of rank >= 1".into())
        })?;
        for (p, name) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: xs.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: in training, zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`. The mask is a pure function of
    /// `seed`. Outside training (or with `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }))
    }

    // ---- linear algebra and layout -----------------------------------------

    /// Batched matrix product `[..., m, k] · [..., k, n]` with broadcast
    /// leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let nb: usize = batch.iter().product();
        let mut out = vec![0.0; nb * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if bb.iter().product::<usize>() == 1 && ba == batch.as_slice() {
            // A shared right operand: fold the batch into the row count.
            gemm_acc(av, bv, &mut out, nb * m, k, n);
        } else {
            let (sa_b, sb_b) = (aligned_strides(ba, &batch), aligned_strides(bb, &batch));
            odometer(&batch, &sa_b, &sb_b, |i, ia, ib| {
                gemm_acc(
                    &av[ia * m * k..(ia + 1) * m * k],
                    &bv[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            });
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Matmul { a, b }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        let valid = perm.len() == xs.len()
            && perm.iter().all(|&p| p < xs.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for shape {xs:?}"
            )));
        }
        let strides = contiguous_strides(&xs);
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        odometer(&out_shape, &src_strides, &src_strides, |i, src, _| out[i] = xv[src]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(Error::Contract(format!(
                "transpose axes ({i}, {j}) out of range for rank {}",
                perm.len()
            )));
        }
        perm.swap(i, j);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Slides a window of `size` with hop `step` over the last axis:
    /// `[..., L] -> [..., N, size]` with `N = (L - size) / step + 1`.
    /// Samples past the last full window are dropped.
    pub fn frames(&mut self, x: Var, size: usize, step: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().ok_or_else(|| Error::Contract("frames needs rank >= 1".into()))?;
        if size == 0 || step == 0 || size > len {
            return Err(Error::Config(format!(
                "cannot frame length {len} with size {size} and step {step}"
            )));
        }
        let count = (len - size) / step + 1;
        let outer = self.value(x).numel() / len;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * count * size);
        for o in 0..outer {
            let line = &xv[o * len..(o + 1) * len];
            for f in 0..count {
                out.extend_from_slice(&line[f * step..f * step + size]);
            }
        }
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.extend([count, size]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Frames { x, size, step }))
    }

    // ---- reductions -------------------------------------------------------

    /// Sums over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= xs.len()) {
            return Err(Error::Contract(format!(
                "sum axis {bad} out of range for shape {xs:?}"
            )));
        }
        let mut out_shape = xs.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        let xv = self.value(x).data();
        let own = contiguous_strides(&xs);
        let to_out = aligned_strides(&out_shape, &xs);
        odometer(&xs, &own, &to_out, |_, ix, io| out[io] += xv[ix]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxes { x }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        let summed = self.sum_axes(x, &axes).expect("all axes are in range");
        self.reshape(summed, &[]).expect("one element reshapes to a scalar")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- spectral ---------------------------------------------------------

    /// Clamped circular autocorrelation along `axis`, computed spectrally:
    /// `max(Re(IDFT(|DFT(x)|²)), 0)` with orthonormal transforms.
    pub fn power_autocorr(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Contract(format!(
                "autocorrelation axis {axis} out of range for shape {xs:?}"
            )));
        }
        let lines = Lines::new(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let (mut re, mut im) = (vec![0.0; lines.len], vec![0.0; lines.len]);
        for start in lines.starts() {
            for t in 0..lines.len {
                re[t] = xv[start + t * lines.inner];
                im[t] = 0.0;
            }
            let energy: f64 = re.iter().map(|v| v * v).sum();
            fft::transform_line(&mut re, &mut im, Direction::Forward);
            for t in 0..lines.len {
                re[t] = re[t] * re[t] + im[t] * im[t];
                im[t] = 0.0;
            }
            fft::transform_line(&mut re, &mut im, Direction::Inverse);
            let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            debug_assert!(
                residue <= IMAG_RESIDUE_TOL * energy.max(1.0),
                "imaginary residue {residue} after inverting a power spectrum"
            );
            for t in 0..lines.len {
                out[start + t * lines.inner] = re[t].max(0.0);
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::PowerAutocorr { x, axis }))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires a
    /// gradient. Leaves the loss does not depend on receive zeros. Repeated
    /// calls add to existing gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let out = node.value.data();

        // Runs `f` on the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Binary { kind, a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let os = node.value.shape();
                acc(*a, &mut |ga| {
                    for_each_broadcast(os, sa, sb, |i, ia, ib| {
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[ib],
                            BinaryKind::Div => g[i] / bv[ib],
                        }
                    })
                });
                acc(*b, &mut |gb| {
                    for_each_broadcast(os, sa, sb, |i, ia, ib| {
                        gb[ib] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[ia],
                            BinaryKind::Div => -g[i] * av[ia] / (bv[ib] * bv[ib]),
                        }
                    })
                });
            }
            Op::Unary { kind, x } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i]
                            * match kind {
                                UnaryKind::Scale(f) => *f,
                                UnaryKind::AddScalar(_) => 1.0,
                                UnaryKind::Sqrt if out[i] > 0.0 => 0.5 / out[i],
                                UnaryKind::Sqrt => 0.0,
                                UnaryKind::Gelu => gauss_cdf(xv[i]) + xv[i] * gauss_pdf(xv[i]),
                            };
                    }
                });
            }
            Op::Softmax { x } => {
                let d = *node.value.shape().last().expect("rank checked in forward");
                acc(*x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((gr, hr), gxr)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let c = inv_std[r] / d as f64;
                        for j in 0..d {
                            gxr[j] += c * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            Op::Matmul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let os = node.value.shape();
                let batch = &os[..os.len() - 2];
                let folded = bb.iter().product::<usize>() == 1 && ba == batch;
                let nb: usize = batch.iter().product();
                let (sa_b, sb_b) = (aligned_strides(ba, batch), aligned_strides(bb, batch));
                acc(*a, &mut |ga| {
                    if folded {
                        gemm_nt_acc(g, bv, ga, nb * m, n, k);
                    } else {
                        odometer(batch, &sa_b, &sb_b, |i, ia, ib| {
                            gemm_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[ib * k * n..(ib + 1) * k * n],
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                                m,
                                n,
                                k,
                            )
                        });
                    }
                });
                acc(*b, &mut |gb| {
                    if folded {
                        gemm_tn_acc(av, g, gb, nb * m, k, n);
                    } else {
                        odometer(batch, &sa_b, &sb_b, |i, ia, ib| {
                            gemm_tn_acc(
                                &av[ia * m * k..(ia + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[ib * k * n..(ib + 1) * k * n],
                                m,
                                k,
                                n,
                            )
                        });
                    }
                });
            }
            Op::Permute { x, perm } => {
                let xs = nodes[x.0].value.shape();
                let strides = contiguous_strides(xs);
                let src: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                let os = node.value.shape();
                acc(*x, &mut |gx| odometer(os, &src, &src, |i, s, _| gx[s] += g[i]));
            }
            Op::Reshape { x } => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }),
            Op::Frames { x, size, step } => {
                let len = *nodes[x.0].value.shape().last().expect("rank checked in forward");
                let count = (len - size) / step + 1;
                acc(*x, &mut |gx| {
                    for (o, gline) in gx.chunks_mut(len).enumerate() {
                        let gf = &g[o * count * size..(o + 1) * count * size];
                        for f in 0..count {
                            for p in 0..*size {
                                gline[f * step + p] += gf[f * size + p];
                            }
                        }
                    }
                });
            }
            Op::PowerAutocorr { x, axis } => {
                let xv = nodes[x.0].value.data();
                let lines = Lines::new(node.value.shape(), *axis);
                let n = lines.len;
                let norm = 1.0 / (n as f64).sqrt();
                acc(*x, &mut |gx| {
                    // d out[k] / d x[j] = (x[j-k] + x[j+k]) / sqrt(n) (indices mod n),
                    // gated by the clamp.
                    let (mut xl, mut gl) = (vec![0.0; n], vec![0.0; n]);
                    for start in lines.starts() {
                        for t in 0..n {
                            let o = start + t * lines.inner;
                            xl[t] = xv[o];
                            gl[t] = if out[o] > 0.0 { g[o] } else { 0.0 };
                        }
                        for j in 0..n {
                            let mut s = 0.0;
                            for (k, gk) in gl.iter().enumerate() {
                                if *gk != 0.0 {
                                    s += gk * (xl[(j + n - k) % n] + xl[(j + k) % n]);
                                }
                            }
                            gx[start + j * lines.inner] += norm * s;
                        }
                    }
                });
            }
            Op::SumAxes { x } => {
                let xs = nodes[x.0].value.shape();
                let own = contiguous_strides(xs);
                let to_out = aligned_strides(node.value.shape(), xs);
                acc(*x, &mut |gx| odometer(xs, &own, &to_out, |_, ix, io| gx[ix] += g[io]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_left_operand() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let x = g.constant(Tensor::from_fn([3, 2, 2], |i| (i[0] * 4 + i[1] * 2 + i[2]) as f64));
        let y = g.matmul(w, x).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 2]);
        // Swapping rows of each batch matrix.
        assert_eq!(&g.value(y).data()[..4], &[2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        // x * Phi(x) at x = 1: Phi(1) = 0.841344746068542948585232545632...
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn softmax_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[4.0, 4.0, 4.0, 0.0, 2f64.ln(), -1e300]));
        let y = g.softmax_lastdim(x).unwrap();
        let v = g.value(y).data();
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[4] - 2.0 / 3.0).abs() < 1e-15);

        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1] >= 0.0 && g.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 7.0, 7.0, 7.0]));
        let one = g.constant(Tensor::ones([3]));
        let zero = g.constant(Tensor::zeros([3]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        let v = g.value(y).data();
        let expect = (1.5f64).sqrt(); // 1 / sqrt(2/3)
        assert!((v[0] + expect).abs() < 1e-9 && v[1].abs() < 1e-12 && (v[2] - expect).abs() < 1e-9);
        assert!(v[3..].iter().all(|z| *z == 0.0));

        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.layer_norm(x, zero, b, 1e-5).unwrap();
        assert_eq!(&g.value(y).data()[..3], &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn dropout_identity_cases_and_rate() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([10_000]));
        assert_eq!(g.dropout(x, 0.7, false, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, true, 1), Err(Error::Param(_))));

        let y = g.dropout(x, 0.5, true, 42).unwrap();
        let v = g.value(y).data();
        let survivors = v.iter().filter(|z| **z != 0.0).count() as f64 / v.len() as f64;
        assert!((survivors - 0.5).abs() < 0.02, "{survivors}");
        assert!(v.iter().all(|z| *z == 0.0 || *z == 2.0));

        let again = g.dropout(x, 0.5, true, 42).unwrap();
        assert_eq!(g.value(again), g.value(y));
    }

    #[test]
    fn frames_tile_overlap_and_truncate() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let f = g.frames(x, 2, 2).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        let f = g.frames(x, 2, 1).unwrap();
        assert_eq!(g.shape(f), &[3, 2]);
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 2.0, 3.0, 3.0, 4.0]);
        let x5 = g.constant(t(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let f = g.frames(x5, 2, 2).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(g.frames(x, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sum_axes_keeps_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64));
        let s = g.sum_axes(x, &[1, 2]).unwrap();
        assert_eq!(g.shape(s), &[2, 1, 1]);
        assert_eq!(g.value(s).data(), &[0.0 + 1.0 + 10.0 + 11.0 + 20.0 + 21.0, 600.0 + 63.0]);
    }

    #[test]
    fn power_autocorr_impulse_and_constant() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0, 0.0, 0.0, 0.0]));
        let s = g.power_autocorr(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-15 && v[1..].iter().all(|z| z.abs() < 1e-15));

        let c = 1.5;
        let x = g.constant(Tensor::full([4], c));
        let s = g.power_autocorr(x, 0).unwrap();
        for z in g.value(s).data() {
            assert!((z - 2.0 * c * c).abs() < 1e-12);
        }
    }
}
