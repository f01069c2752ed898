//! 3-D convolution and transposed convolution over `T×H×W×C` volumes.
//!
//! Weights are laid out `[kt, kh, kw, cin, cout]`. Both layers are built from
//! three shared kernels: a strided gather, its adjoint scatter and the weight
//! correlation. Work is split by output frame; every output value is
//! accumulated by a single thread in a fixed order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_strided, TensorF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad,
        }
    }

    /// 1×1×1 kernel, unit stride.
    pub fn pointwise() -> Self {
        Self::new([1, 1, 1], [1, 1, 1], [0, 0, 0])
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.stride.contains(&0) || self.kernel.contains(&0) {
            return Err(Error::Config(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Output extents of a forward convolution: `(n + 2p − f) / s + 1`.
    pub fn conv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if self.kernel[a] > padded {
                return Err(Error::Config(format!(
                    "kernel extent {} exceeds padded input {} on axis {a}",
                    self.kernel[a], padded
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution: `(n − 1)s − 2p + f`.
    pub fn transpose_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * self.stride[a] + self.kernel[a];
            if input[a] == 0 || 2 * self.pad[a] >= full {
                return Err(Error::Config(format!(
                    "transposed convolution on axis {a} leaves no output"
                )));
            }
            out[a] = full - 2 * self.pad[a];
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Dims {
    fn of(x: &TensorF) -> Result<Self> {
        let (t, h, w, c) = x.dims4()?;
        Ok(Dims { t, h, w, c })
    }

    fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    fn len(&self) -> usize {
        self.t * self.frame_len()
    }
}

/// Position on the dense grid reached from strided position `j` via `tap`.
#[inline]
fn dense_index(j: usize, stride: usize, pad: usize, tap: usize, extent: usize) -> Option<usize> {
    let v = (j * stride + tap).checked_sub(pad)?;
    (v < extent).then_some(v)
}

/// Strided positions `j < n` whose dense position `j·s − p + tap` lies in
/// `0..extent`.
fn valid_range(n: usize, stride: usize, pad: usize, tap: usize, extent: usize) -> std::ops::Range<usize> {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if extent + pad <= tap { 0 } else { (extent + pad - tap).div_ceil(stride) };
    lo..hi.min(n).max(lo)
}

/// `dst[o] += Σ_tap src[o·s − p + tap] · wt[tap]`, `wt` laid out
/// `[tap][src_c][dst_c]`. Each output row and tap is one strided product.
fn gather(src: &[f64], sd: Dims, wt: &[f64], dd: Dims, g: &ConvGeometry) -> Vec<f64> {
    let [kt, kh, kw] = g.kernel;
    let mut dst = vec![0.0; dd.len()];
    let wtap = sd.c * dd.c;
    let xstep = g.stride[2] * sd.c;
    dst.par_chunks_mut(dd.frame_len().max(1))
        .enumerate()
        .for_each(|(to, frame)| {
            for oy in 0..dd.h {
                for a in 0..kt {
                    let Some(ti) = dense_index(to, g.stride[0], g.pad[0], a, sd.t) else {
                        continue;
                    };
                    for b in 0..kh {
                        let Some(yi) = dense_index(oy, g.stride[1], g.pad[1], b, sd.h) else {
                            continue;
                        };
                        for c in 0..kw {
                            let xs = valid_range(dd.w, g.stride[2], g.pad[2], c, sd.w);
                            if xs.is_empty() {
                                continue;
                            }
                            let xi = xs.start * g.stride[2] + c - g.pad[2];
                            let tap = (a * kh + b) * kw + c;
                            let s0 = ((ti * sd.h + yi) * sd.w + xi) * sd.c;
                            let o0 = (oy * dd.w + xs.start) * dd.c;
                            gemm_strided(
                                xs.len(),
                                sd.c,
                                dd.c,
                                &src[s0..],
                                (xstep, 1),
                                &wt[tap * wtap..(tap + 1) * wtap],
                                (dd.c, 1),
                                &mut frame[o0..],
                                (dd.c, 1),
                            );
                        }
                    }
                }
            }
        });
    dst
}

/// Adjoint of [`gather`]: `dst[j·s − p + tap] += src[j] · wt[tap]`.
fn scatter(src: &[f64], sd: Dims, wt: &[f64], dd: Dims, g: &ConvGeometry) -> Vec<f64> {
    let [kt, kh, kw] = g.kernel;
    let mut dst = vec![0.0; dd.len()];
    let wtap = sd.c * dd.c;
    let xstep = g.stride[2] * dd.c;
    dst.par_chunks_mut(dd.frame_len().max(1))
        .enumerate()
        .for_each(|(td, frame)| {
            for a in 0..kt {
                let num = td + g.pad[0];
                if num < a || (num - a) % g.stride[0] != 0 {
                    continue;
                }
                let ts = (num - a) / g.stride[0];
                if ts >= sd.t {
                    continue;
                }
                for sy in 0..sd.h {
                    for b in 0..kh {
                        let Some(dy) = dense_index(sy, g.stride[1], g.pad[1], b, dd.h) else {
                            continue;
                        };
                        for c in 0..kw {
                            let xs = valid_range(sd.w, g.stride[2], g.pad[2], c, dd.w);
                            if xs.is_empty() {
                                continue;
                            }
                            let dx = xs.start * g.stride[2] + c - g.pad[2];
                            let tap = (a * kh + b) * kw + c;
                            let s0 = ((ts * sd.h + sy) * sd.w + xs.start) * sd.c;
                            let o0 = (dy * dd.w + dx) * dd.c;
                            gemm_strided(
                                xs.len(),
                                sd.c,
                                dd.c,
                                &src[s0..],
                                (sd.c, 1),
                                &wt[tap * wtap..(tap + 1) * wtap],
                                (dd.c, 1),
                                &mut frame[o0..],
                                (xstep, 1),
                            );
                        }
                    }
                }
            }
        });
    dst
}

/// `Σ_j dense[j·s − p + tap] ⊗ strided[j]`, laid out `[tap][dense_c][strided_c]`.
fn correlate(dense: &[f64], dd: Dims, strided: &[f64], sd: Dims, g: &ConvGeometry) -> Vec<f64> {
    let [kt, kh, kw] = g.kernel;
    let size = g.taps() * dd.c * sd.c;
    let xstep = g.stride[2] * dd.c;
    let partials: Vec<Vec<f64>> = (0..sd.t)
        .into_par_iter()
        .map(|ts| {
            let mut acc = vec![0.0; size];
            for a in 0..kt {
                let Some(td) = dense_index(ts, g.stride[0], g.pad[0], a, dd.t) else {
                    continue;
                };
                for sy in 0..sd.h {
                    for b in 0..kh {
                        let Some(dy) = dense_index(sy, g.stride[1], g.pad[1], b, dd.h) else {
                            continue;
                        };
                        for c in 0..kw {
                            let xs = valid_range(sd.w, g.stride[2], g.pad[2], c, dd.w);
                            if xs.is_empty() {
                                continue;
                            }
                            let dx = xs.start * g.stride[2] + c - g.pad[2];
                            let tap = (a * kh + b) * kw + c;
                            let d0 = ((td * dd.h + dy) * dd.w + dx) * dd.c;
                            let s0 = ((ts * sd.h + sy) * sd.w + xs.start) * sd.c;
                            // (dense_c × rows) · (rows × strided_c)
                            gemm_strided(
                                dd.c,
                                xs.len(),
                                sd.c,
                                &dense[d0..],
                                (1, xstep),
                                &strided[s0..],
                                (sd.c, 1),
                                &mut acc[tap * dd.c * sd.c..(tap + 1) * dd.c * sd.c],
                                (sd.c, 1),
                            );
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; size];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `[tap][a][b]` → `[tap][b][a]`.
fn transpose_taps(w: &[f64], taps: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for t in 0..taps {
        for i in 0..a {
            for j in 0..b {
                out[(t * b + j) * a + i] = w[(t * a + i) * b + j];
            }
        }
    }
    out
}

fn check_weights(w: &TensorF, g: &ConvGeometry, cin: usize) -> Result<usize> {
    match w.shape() {
        [kt, kh, kw, wi, wo] if [*kt, *kh, *kw] == g.kernel && *wi == cin => Ok(*wo),
        s => Err(Error::Config(format!(
            "weights {s:?} do not match kernel {:?} with {cin} input channels",
            g.kernel
        ))),
    }
}

fn add_bias(out: &mut [f64], bias: Option<&TensorF>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != c {
            return Err(Error::Config(format!(
                "bias has {} entries for {c} channels",
                b.len()
            )));
        }
        for pix in out.chunks_mut(c) {
            for (o, bv) in pix.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(())
}

fn bias_grad(grad: &[f64], c: usize) -> TensorF {
    let mut db = vec![0.0; c];
    for pix in grad.chunks(c) {
        for (d, g) in db.iter_mut().zip(pix) {
            *d += g;
        }
    }
    TensorF::new(vec![c], db).expect("bias length")
}

/// Parameter and input gradients of a convolution layer.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: TensorF,
    pub weight: TensorF,
    pub bias: TensorF,
}

pub fn conv3d(x: &TensorF, w: &TensorF, bias: Option<&TensorF>, g: &ConvGeometry) -> Result<TensorF> {
    let sd = Dims::of(x)?;
    let cout = check_weights(w, g, sd.c)?;
    let [t, h, wd] = g.conv_output([sd.t, sd.h, sd.w])?;
    let dd = Dims { t, h, w: wd, c: cout };
    let mut out = gather(x.data(), sd, w.data(), dd, g);
    add_bias(&mut out, bias, cout)?;
    TensorF::new(vec![t, h, wd, cout], out)
}

pub fn conv3d_backward(x: &TensorF, w: &TensorF, g: &ConvGeometry, grad_out: &TensorF) -> Result<ConvGrads> {
    let xd = Dims::of(x)?;
    let cout = check_weights(w, g, xd.c)?;
    let yd = Dims::of(grad_out)?;
    let expect = g.conv_output([xd.t, xd.h, xd.w])?;
    if [yd.t, yd.h, yd.w] != expect || yd.c != cout {
        return Err(Error::Dimension(format!(
            "conv gradient {:?} does not match output {expect:?}×{cout}",
            grad_out.shape()
        )));
    }
    let wt = transpose_taps(w.data(), g.taps(), xd.c, cout);
    let dx = scatter(grad_out.data(), yd, &wt, xd, g);
    let dw = correlate(x.data(), xd, grad_out.data(), yd, g);
    Ok(ConvGrads {
        input: TensorF::new(x.shape().to_vec(), dx)?,
        weight: TensorF::new(w.shape().to_vec(), dw)?,
        bias: bias_grad(grad_out.data(), cout),
    })
}

pub fn conv_transpose3d(
    x: &TensorF,
    w: &TensorF,
    bias: Option<&TensorF>,
    g: &ConvGeometry,
) -> Result<TensorF> {
    let sd = Dims::of(x)?;
    let cout = check_weights(w, g, sd.c)?;
    let [t, h, wd] = g.transpose_output([sd.t, sd.h, sd.w])?;
    let dd = Dims { t, h, w: wd, c: cout };
    let mut out = scatter(x.data(), sd, w.data(), dd, g);
    add_bias(&mut out, bias, cout)?;
    TensorF::new(vec![t, h, wd, cout], out)
}

pub fn conv_transpose3d_backward(
    x: &TensorF,
    w: &TensorF,
    g: &ConvGeometry,
    grad_out: &TensorF,
) -> Result<ConvGrads> {
    let xd = Dims::of(x)?;
    let cout = check_weights(w, g, xd.c)?;
    let yd = Dims::of(grad_out)?;
    let expect = g.transpose_output([xd.t, xd.h, xd.w])?;
    if [yd.t, yd.h, yd.w] != expect || yd.c != cout {
        return Err(Error::Dimension(format!(
            "transposed conv gradient {:?} does not match output {expect:?}×{cout}",
            grad_out.shape()
        )));
    }
    let wt = transpose_taps(w.data(), g.taps(), xd.c, cout);
    let dx = gather(grad_out.data(), yd, &wt, xd, g);
    let dw_t = correlate(grad_out.data(), yd, x.data(), xd, g);
    let dw = transpose_taps(&dw_t, g.taps(), cout, xd.c);
    Ok(ConvGrads {
        input: TensorF::new(x.shape().to_vec(), dx)?,
        weight: TensorF::new(w.shape().to_vec(), dw)?,
        bias: bias_grad(grad_out.data(), cout),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct summation over every output index and kernel tap.
    fn conv_oracle(x: &TensorF, w: &TensorF, g: &ConvGeometry) -> TensorF {
        let (t, h, wd, cin) = x.dims4().unwrap();
        let cout = w.shape()[4];
        let [ot, oh, ow] = g.conv_output([t, h, wd]).unwrap();
        let mut out = TensorF::zeros(&[ot, oh, ow, cout]);
        let [kt, kh, kw] = g.kernel;
        for a in 0..ot {
            for b in 0..oh {
                for c in 0..ow {
                    for co in 0..cout {
                        let mut s = 0.0;
                        for i in 0..kt {
                            for j in 0..kh {
                                for k in 0..kw {
                                    let ti = (a * g.stride[0] + i) as isize - g.pad[0] as isize;
                                    let yi = (b * g.stride[1] + j) as isize - g.pad[1] as isize;
                                    let xi = (c * g.stride[2] + k) as isize - g.pad[2] as isize;
                                    if ti < 0 || yi < 0 || xi < 0 {
                                        continue;
                                    }
                                    let (ti, yi, xi) = (ti as usize, yi as usize, xi as usize);
                                    if ti >= t || yi >= h || xi >= wd {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        s += x.data()[((ti * h + yi) * wd + xi) * cin + ci]
                                            * w.data()[((((i * kh + j) * kw + k) * cin) + ci) * cout + co];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((a * oh + b) * ow + c) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &TensorF, b: &TensorF) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = Rng::new(1);
        let x = TensorF::randn(&[2, 3, 4, 1], 1.0, &mut rng);
        let w = TensorF::full(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d(&x, &w, None, &ConvGeometry::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = TensorF::full(&[1, 5, 5, 1], 1.0);
        let w = TensorF::full(&[1, 3, 3, 1, 1], 1.0);
        let g = ConvGeometry::new([1, 3, 3], [1, 1, 1], [0, 0, 0]);
        let y = conv3d(&x, &w, None, &g).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn output_extent_rule() {
        let g = ConvGeometry::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        assert_eq!(g.conv_output([8, 64, 64]).unwrap(), [8, 32, 32]);
        let g = ConvGeometry::new([1, 4, 4], [1, 2, 2], [0, 1, 1]);
        assert_eq!(g.transpose_output([8, 16, 16]).unwrap(), [8, 32, 32]);
        let bad = ConvGeometry::new([1, 3, 3], [1, 0, 1], [0, 0, 0]);
        assert!(matches!(bad.conv_output([1, 4, 4]), Err(Error::Config(_))));
        let big = ConvGeometry::new([1, 7, 7], [1, 1, 1], [0, 0, 0]);
        assert!(matches!(big.conv_output([1, 4, 4]), Err(Error::Config(_))));
    }

    #[test]
    fn random_conv_matches_direct_summation() {
        let mut rng = Rng::new(11);
        for case in 0..20 {
            let t = 1 + case % 4;
            let h = 3 + case % 6;
            let w = 4 + (case * 3) % 5;
            let cin = 1 + case % 3;
            let cout = 1 + (case + 1) % 3;
            let kernel = [1 + case % 3, 1 + (case + 1) % 3, 1 + (case + 2) % 3];
            let stride = [1 + case % 2, 1 + (case / 2) % 2, 1 + (case / 3) % 2];
            let pad = [case % 2, (case / 2) % 2, 1];
            let g = ConvGeometry::new(kernel, stride, pad);
            let x = TensorF::randn(&[t, h, w, cin], 1.0, &mut rng);
            let wt = TensorF::randn(&[kernel[0], kernel[1], kernel[2], cin, cout], 1.0, &mut rng);
            let Ok(_) = g.conv_output([t, h, w]) else { continue };
            let fast = conv3d(&x, &wt, None, &g).unwrap();
            let slow = conv_oracle(&x, &wt, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        let mut rng = Rng::new(2);
        let g = ConvGeometry::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let x = TensorF::randn(&[3, 6, 5, 2], 1.0, &mut rng);
        let w = TensorF::randn(&[3, 3, 3, 2, 3], 1.0, &mut rng);
        let y = conv3d(&x, &w, None, &g).unwrap();
        let gy = TensorF::randn(y.shape(), 1.0, &mut rng);
        let grads = conv3d_backward(&x, &w, &g, &gy).unwrap();
        // <conv(x), gy> is linear in x and in w.
        assert!((dot(&y, &gy) - dot(&x, &grads.input)).abs() < 1e-9);
        assert!((dot(&y, &gy) - dot(&w, &grads.weight)).abs() < 1e-9);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = Rng::new(4);
        let g = ConvGeometry::new([1, 4, 4], [1, 2, 2], [0, 1, 1]);
        // conv: big → small with weights [.., cin=3, cout=2]; transpose maps small → big.
        let big = TensorF::randn(&[2, 8, 8, 3], 1.0, &mut rng);
        let small = TensorF::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        let w = TensorF::randn(&[1, 4, 4, 3, 2], 1.0, &mut rng);
        let conv = conv3d(&big, &w, None, &g).unwrap();
        assert_eq!(conv.shape(), small.shape());
        // Transposed layer with weights [.., cin=2, cout=3] equal to the swapped conv weights.
        let wt = TensorF::new(vec![1, 4, 4, 2, 3], transpose_taps(w.data(), 16, 3, 2)).unwrap();
        let up = conv_transpose3d(&small, &wt, None, &g).unwrap();
        assert_eq!(up.shape(), big.shape());
        assert!((dot(&conv, &small) - dot(&big, &up)).abs() < 1e-9);
    }

    #[test]
    fn transpose_backward_is_adjoint() {
        let mut rng = Rng::new(6);
        let g = ConvGeometry::new([2, 4, 4], [1, 2, 2], [0, 1, 1]);
        let x = TensorF::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let w = TensorF::randn(&[2, 4, 4, 2, 3], 1.0, &mut rng);
        let b = TensorF::randn(&[3], 1.0, &mut rng);
        let y = conv_transpose3d(&x, &w, None, &g).unwrap();
        let gy = TensorF::randn(y.shape(), 1.0, &mut rng);
        let grads = conv_transpose3d_backward(&x, &w, &g, &gy).unwrap();
        assert!((dot(&y, &gy) - dot(&x, &grads.input)).abs() < 1e-9);
        assert!((dot(&y, &gy) - dot(&w, &grads.weight)).abs() < 1e-9);
        let yb = conv_transpose3d(&x, &w, Some(&b), &g).unwrap();
        let delta = dot(&yb, &gy) - dot(&y, &gy);
        assert!((delta - dot(&b, &grads.bias)).abs() < 1e-9);
    }
}
