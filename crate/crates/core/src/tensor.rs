//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Axis order for video activations is always `T, H, W, C`. All arithmetic is
//! `f64` and every reduction runs left to right, so results are bit-stable
//! across runs and thread counts.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorF {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorF {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorF { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        TensorF {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        TensorF {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.inner().sample(StandardNormal);
            z * std
        })
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.inner().gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a rank-4 `T×H×W×C` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [t, h, w, c] => Ok((t, h, w, c)),
            _ => Err(Error::Dimension(format!(
                "expected T×H×W×C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        TensorF {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &TensorF) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &TensorF) -> Result<TensorF> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn scale(&self, k: f64) -> TensorF {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &TensorF) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// One frame of a `T×H×W×C` tensor as a flat slice.
    pub fn frame(&self, t: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[t * per..(t + 1) * per]
    }
}

/// Standard matrix product.
pub fn matmul(a: &TensorF, b: &TensorF) -> Result<TensorF> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    TensorF::new(vec![m, n], out)
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    strided(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out += aᵀ · b` for row-major `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    strided(a, (1, m), b, (n, 1), out, m, k, n);
}

/// `out += a · bᵀ` for row-major `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    strided(a, (k, 1), b, (1, k), out, m, k, n);
}

/// `out (m×n, row-major) += A · B` where `A` is `m×k` and `B` is `k×n` with
/// the given (row, column) strides.
fn strided(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, k, n, a, sa, b, sb, out, (n, 1));
}

/// Largest index touched by an `r×c` view with strides `s`, plus one.
fn extent(r: usize, c: usize, s: (usize, usize)) -> usize {
    (r - 1) * s.0 + (c - 1) * s.1 + 1
}

/// `C += A · B` on strided views: `A` is `m×k`, `B` is `k×n`, `C` is `m×n`,
/// each given as a slice starting at element (0, 0) and (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(
        a.len() >= extent(m, k, sa) && b.len() >= extent(k, n, sb) && c.len() >= extent(m, n, sc),
        "gemm operand too short"
    );
    // SAFETY: the bounds check above covers every element the views reach,
    // and `c` is a unique borrow so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &TensorF) -> Result<TensorF> {
    let (_, n) = a.dims2()?;
    let mut out = a.clone();
    if n > 0 {
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Given softmax output `p` and upstream `dp`, overwrite `dp` with the
/// gradient with respect to the logits.
pub(crate) fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (g, &pv) in dp.iter_mut().zip(p) {
        *g = pv * (*g - dot);
    }
}

/// Concatenate `T×H×W×Cᵢ` tensors along the channel axis.
pub fn concat_channels(parts: &[&TensorF]) -> Result<TensorF> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
    let (t, h, w, _) = first.dims4()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pt, ph, pw, pc) = p.dims4()?;
        if (pt, ph, pw) != (t, h, w) {
            return Err(Error::Dimension(format!(
                "cannot concatenate {:?} with {:?}",
                first.shape, p.shape
            )));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(t * h * w * total);
    for pix in 0..t * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[pix * c..(pix + 1) * c]);
        }
    }
    TensorF::new(vec![t, h, w, total], out)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(x: &TensorF, widths: &[usize]) -> Result<Vec<TensorF>> {
    let (t, h, w, c) = x.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::Dimension(format!(
            "channel split {widths:?} does not cover {c} channels"
        )));
    }
    let mut outs: Vec<Vec<f64>> = widths
        .iter()
        .map(|&wd| Vec::with_capacity(t * h * w * wd))
        .collect();
    for pix in x.data.chunks(c) {
        let mut off = 0;
        for (o, &wd) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&pix[off..off + wd]);
            off += wd;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wd)| TensorF::new(vec![t, h, w, wd], d))
        .collect()
}

/// Non-overlapping spatial average pooling by an integer factor.
pub fn avg_pool_spatial(x: &TensorF, factor: usize) -> Result<TensorF> {
    let (t, h, w, c) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "{h}×{w} is not divisible by pooling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; t * oh * ow * c];
    for ti in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((ti * oh + oy) * ow + ox) * c;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = ((ti * h + oy * factor + dy) * w + ox * factor + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += x.data[src + ch];
                        }
                    }
                }
                for v in &mut out[dst..dst + c] {
                    *v *= norm;
                }
            }
        }
    }
    TensorF::new(vec![t, oh, ow, c], out)
}

/// Adjoint of [`avg_pool_spatial`]: spreads each pooled gradient evenly.
pub fn avg_pool_spatial_backward(grad: &TensorF, factor: usize) -> Result<TensorF> {
    let (t, oh, ow, c) = grad.dims4()?;
    let (h, w) = (oh * factor, ow * factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; t * h * w * c];
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let src = ((ti * oh + y / factor) * ow + x / factor) * c;
                let dst = ((ti * h + y) * w + x) * c;
                for ch in 0..c {
                    out[dst + ch] = grad.data[src + ch] * norm;
                }
            }
        }
    }
    TensorF::new(vec![t, h, w, c], out)
}

/// Nearest-neighbour spatial upsampling by an integer factor.
pub fn upsample_nearest(x: &TensorF, factor: usize) -> Result<TensorF> {
    let (t, h, w, c) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(t * oh * ow * c);
    for ti in 0..t {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((ti * h + y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&x.data[src..src + c]);
            }
        }
    }
    TensorF::new(vec![t, oh, ow, c], out)
}
