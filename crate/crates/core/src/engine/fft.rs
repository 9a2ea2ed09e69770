//! Orthonormal discrete Fourier transforms.
//!
//! Both directions are scaled by `1/sqrt(n)`, so the forward transform is
//! unitary and energy is preserved. Power-of-two lengths use an iterative
//! radix-2 Cooley-Tukey kernel; every other length falls back to the direct
//! O(n^2) sum.

use std::f64::consts::PI;

use super::tensor::{ComplexTensor, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

/// Transforms one complex line in place with orthonormal scaling.
pub fn transform_line(re: &mut [f64], im: &mut [f64], dir: Direction) {
    assert_eq!(re.len(), im.len());
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im, dir);
    } else {
        let (r, i) = naive_dft(re, im, dir);
        re.copy_from_slice(&r);
        im.copy_from_slice(&i);
    }
    let scale = 1.0 / (n as f64).sqrt();
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
}

/// Unscaled direct DFT.
pub fn naive_dft(re: &[f64], im: &[f64], dir: Direction) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = dir.sign();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            // Reduce the index product first so the angle stays in [0, 2pi).
            let angle = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = angle.sin_cos();
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    (out_re, out_im)
}

/// Unscaled in-place iterative radix-2 FFT. `re.len()` must be a power of two.
fn radix2(re: &mut [f64], im: &mut [f64], dir: Direction) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();

    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let sign = dir.sign();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for k in 0..half {
            let (ws, wc) = (step * k as f64).sin_cos();
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wc - im[b] * ws;
                let ti = re[b] * ws + im[b] * wc;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Geometry of the 1-D lines running along `axis` of a row-major array.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lines {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Lines {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Lines {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Flat offsets of every line's first element; consecutive elements of
    /// a line are `inner` apart.
    pub fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.outer).flat_map(move |o| (0..self.inner).map(move |i| o * self.len * self.inner + i))
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "transform axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn transform_axis(x: &mut ComplexTensor, axis: usize, dir: Direction) -> Result<()> {
    check_axis(x.shape(), axis)?;
    let lines = Lines::new(x.shape(), axis);
    let (re, im) = x.parts_mut();
    let mut br = vec![0.0; lines.len];
    let mut bi = vec![0.0; lines.len];
    for start in lines.starts() {
        for t in 0..lines.len {
            br[t] = re[start + t * lines.inner];
            bi[t] = im[start + t * lines.inner];
        }
        transform_line(&mut br, &mut bi, dir);
        for t in 0..lines.len {
            re[start + t * lines.inner] = br[t];
            im[start + t * lines.inner] = bi[t];
        }
    }
    Ok(())
}

/// Orthonormal DFT of a real tensor along `axis`.
pub fn dft_forward(x: &Tensor, axis: usize) -> Result<ComplexTensor> {
    let mut out = ComplexTensor::from_real(x);
    transform_axis(&mut out, axis, Direction::Forward)?;
    Ok(out)
}

/// Orthonormal inverse DFT along `axis`.
pub fn dft_inverse(x: &ComplexTensor, axis: usize) -> Result<ComplexTensor> {
    let mut out = x.clone();
    transform_axis(&mut out, axis, Direction::Inverse)?;
    Ok(out)
}
