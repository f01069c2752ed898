//! Attention blocks over `T×H×W×C` feature volumes.
//!
//! * spatio-temporal attention: for every target frame `i`, keys and values
//!   come from frame `i` and queries from every frame of the clip; the `T`
//!   attended maps are pooled over time.
//! * self-attention: queries, keys and values from the same frame.
//! * tag-based attention: predicted tags are average-pooled to feature
//!   resolution, expanded by a 1×1 projection and fed through the
//!   spatio-temporal wiring.
//!
//! Scores are scaled dot products normalized with a softmax over key
//! positions. Module outputs do not include a residual path; the network adds
//! one where it needs it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, gemm, gemm_nt, gemm_tn, softmax_backward_in_place, softmax_in_place, TensorF};

/// How the per-query-frame attended maps are reduced over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalPooling {
    #[default]
    Mean,
    Max,
}

/// 1×1 projections of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `C_in × d`
    pub query: TensorF,
    /// `C_in × d`
    pub key: TensorF,
    /// `C_in × d_v`
    pub value: TensorF,
    /// `d_v × C_out`
    pub output: TensorF,
    /// `C_out`
    pub output_bias: TensorF,
}

impl AttentionWeights {
    pub fn init(c_in: usize, d: usize, d_v: usize, c_out: usize, out_scale: f64, rng: &mut Rng) -> Self {
        let qk_std = (1.0 / c_in as f64).sqrt();
        AttentionWeights {
            query: TensorF::randn(&[c_in, d], qk_std, rng),
            key: TensorF::randn(&[c_in, d], qk_std, rng),
            value: TensorF::randn(&[c_in, d_v], qk_std, rng),
            output: TensorF::randn(&[d_v, c_out], out_scale * (1.0 / d_v as f64).sqrt(), rng),
            output_bias: TensorF::zeros(&[c_out]),
        }
    }

    /// Identity query/key/value/output projections of width `c`.
    pub fn identity(c: usize) -> Self {
        let eye = TensorF::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        AttentionWeights {
            query: eye.clone(),
            key: eye.clone(),
            value: eye.clone(),
            output: eye,
            output_bias: TensorF::zeros(&[c]),
        }
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let (c_in, d) = self.query.dims2()?;
        let (kc, kd) = self.key.dims2()?;
        let (vc, d_v) = self.value.dims2()?;
        let (od, c_out) = self.output.dims2()?;
        if kc != c_in || vc != c_in || kd != d || od != d_v || self.output_bias.len() != c_out {
            return Err(Error::Config(format!(
                "inconsistent attention projections q {:?} k {:?} v {:?} o {:?} b {:?}",
                self.query.shape(),
                self.key.shape(),
                self.value.shape(),
                self.output.shape(),
                self.output_bias.shape()
            )));
        }
        Ok((c_in, d, d_v, c_out))
    }

    pub fn zeros_like(&self) -> Self {
        AttentionWeights {
            query: TensorF::zeros(self.query.shape()),
            key: TensorF::zeros(self.key.shape()),
            value: TensorF::zeros(self.value.shape()),
            output: TensorF::zeros(self.output.shape()),
            output_bias: TensorF::zeros(self.output_bias.shape()),
        }
    }

    /// `(suffix, tensor)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, &TensorF); 5] {
        [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
            ("output_bias", &self.output_bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut TensorF); 5] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("output", &mut self.output),
            ("output_bias", &mut self.output_bias),
        ]
    }
}

/// Row-normalized attention weights between one query frame and one key frame.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub weights: TensorF,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Wiring {
    AllFrames,
    SameFrame,
}

impl Wiring {
    fn query_frames(self, target: usize, frames: usize) -> std::ops::Range<usize> {
        match self {
            Wiring::AllFrames => 0..frames,
            Wiring::SameFrame => target..target + 1,
        }
    }
}

/// Cached activations of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    wiring: Wiring,
    pooling: TemporalPooling,
    input: TensorF,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    pooled: Vec<f64>,
    /// For max pooling: winning query frame per pooled element.
    argmax: Vec<u32>,
    dims: (usize, usize, usize, usize),
}

fn project(x: &[f64], rows: usize, w: &TensorF) -> Vec<f64> {
    let (c, d) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * d];
    gemm(x, w.data(), &mut out, rows, c, d);
    out
}

fn scores(q: &[f64], k: &[f64], p: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; p * p];
    gemm_nt(q, k, &mut s, p, d, p);
    let scale = 1.0 / (d as f64).sqrt();
    for row in s.chunks_mut(p) {
        for v in row.iter_mut() {
            *v *= scale;
        }
        softmax_in_place(row);
    }
    s
}

fn attend(x: &TensorF, w: &AttentionWeights, wiring: Wiring, pooling: TemporalPooling) -> Result<(TensorF, AttentionTrace)> {
    let (t, h, wd, c) = x.dims4()?;
    let (c_in, d, d_v, c_out) = w.dims()?;
    if c != c_in {
        return Err(Error::Config(format!(
            "attention expects {c_in} input channels, got {c}"
        )));
    }
    if t == 0 {
        return Err(Error::Config("attention needs at least one frame".into()));
    }
    let p = h * wd;
    let rows = t * p;
    let q = project(x.data(), rows, &w.query);
    let k = project(x.data(), rows, &w.key);
    let v = project(x.data(), rows, &w.value);

    let per_target: Vec<(Vec<f64>, Vec<u32>)> = (0..t)
        .into_par_iter()
        .map(|i| {
            let ki = &k[i * p * d..(i + 1) * p * d];
            let vi = &v[i * p * d_v..(i + 1) * p * d_v];
            let range = wiring.query_frames(i, t);
            let n_q = range.len() as f64;
            let mut pooled = vec![0.0; p * d_v];
            let mut arg = Vec::new();
            if pooling == TemporalPooling::Max {
                pooled.fill(f64::NEG_INFINITY);
                arg = vec![0u32; p * d_v];
            }
            for qt in range {
                let a = scores(&q[qt * p * d..(qt + 1) * p * d], ki, p, d);
                let mut o = vec![0.0; p * d_v];
                gemm(&a, vi, &mut o, p, p, d_v);
                match pooling {
                    TemporalPooling::Mean => {
                        for (acc, val) in pooled.iter_mut().zip(&o) {
                            *acc += val / n_q;
                        }
                    }
                    TemporalPooling::Max => {
                        for (j, val) in o.iter().enumerate() {
                            if *val > pooled[j] {
                                pooled[j] = *val;
                                arg[j] = qt as u32;
                            }
                        }
                    }
                }
            }
            (pooled, arg)
        })
        .collect();

    let mut pooled = Vec::with_capacity(rows * d_v);
    let mut argmax = Vec::new();
    for (pl, a) in per_target {
        pooled.extend(pl);
        argmax.extend(a);
    }
    let mut out = vec![0.0; rows * c_out];
    gemm(&pooled, w.output.data(), &mut out, rows, d_v, c_out);
    for pix in out.chunks_mut(c_out) {
        for (o, b) in pix.iter_mut().zip(w.output_bias.data()) {
            *o += b;
        }
    }
    let trace = AttentionTrace {
        wiring,
        pooling,
        input: x.clone(),
        q,
        k,
        v,
        pooled,
        argmax,
        dims: (t, p, d, d_v),
    };
    Ok((TensorF::new(vec![t, h, wd, c_out], out)?, trace))
}

/// Gradients with respect to the block input and its projections.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub input: TensorF,
    pub weights: AttentionWeights,
}

fn attend_backward(trace: &AttentionTrace, w: &AttentionWeights, grad_out: &TensorF) -> Result<AttentionGrads> {
    let (t, p, d, d_v) = trace.dims;
    let (c_in, _, _, c_out) = w.dims()?;
    let rows = t * p;
    if grad_out.len() != rows * c_out {
        return Err(Error::Dimension(format!(
            "attention gradient {:?} does not match {t} frames of {p} positions × {c_out}",
            grad_out.shape()
        )));
    }
    let go = grad_out.data();
    let mut g_out_w = vec![0.0; d_v * c_out];
    gemm_tn(&trace.pooled, go, &mut g_out_w, rows, d_v, c_out);
    let mut g_bias = vec![0.0; c_out];
    for pix in go.chunks(c_out) {
        for (b, g) in g_bias.iter_mut().zip(pix) {
            *b += g;
        }
    }
    let mut g_pooled = vec![0.0; rows * d_v];
    gemm_nt(go, w.output.data(), &mut g_pooled, rows, c_out, d_v);

    let scale = 1.0 / (d as f64).sqrt();
    // Per target frame: (dQ over all frames, dK_i, dV_i).
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..t)
        .into_par_iter()
        .map(|i| {
            let ki = &trace.k[i * p * d..(i + 1) * p * d];
            let vi = &trace.v[i * p * d_v..(i + 1) * p * d_v];
            let gp = &g_pooled[i * p * d_v..(i + 1) * p * d_v];
            let range = trace.wiring.query_frames(i, t);
            let n_q = range.len() as f64;
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; p * d];
            let mut dv = vec![0.0; p * d_v];
            for qt in range {
                let go_t: Vec<f64> = match trace.pooling {
                    TemporalPooling::Mean => gp.iter().map(|g| g / n_q).collect(),
                    TemporalPooling::Max => {
                        let arg = &trace.argmax[i * p * d_v..(i + 1) * p * d_v];
                        gp.iter()
                            .zip(arg)
                            .map(|(g, &a)| if a as usize == qt { *g } else { 0.0 })
                            .collect()
                    }
                };
                if go_t.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let qt_rows = &trace.q[qt * p * d..(qt + 1) * p * d];
                let a = scores(qt_rows, ki, p, d);
                gemm_tn(&a, &go_t, &mut dv, p, p, d_v);
                let mut da = vec![0.0; p * p];
                gemm_nt(&go_t, vi, &mut da, p, d_v, p);
                for (arow, drow) in a.chunks(p).zip(da.chunks_mut(p)) {
                    softmax_backward_in_place(arow, drow);
                    for g in drow.iter_mut() {
                        *g *= scale;
                    }
                }
                gemm(&da, ki, &mut dq[qt * p * d..(qt + 1) * p * d], p, p, d);
                gemm_tn(&da, qt_rows, &mut dk, p, p, d);
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = vec![0.0; rows * d];
    let mut dk = Vec::with_capacity(rows * d);
    let mut dv = Vec::with_capacity(rows * d_v);
    for (pq, pk, pv) in parts {
        for (a, b) in dq.iter_mut().zip(pq) {
            *a += b;
        }
        dk.extend(pk);
        dv.extend(pv);
    }

    let x = trace.input.data();
    let mut g_wq = vec![0.0; c_in * d];
    let mut g_wk = vec![0.0; c_in * d];
    let mut g_wv = vec![0.0; c_in * d_v];
    gemm_tn(x, &dq, &mut g_wq, rows, c_in, d);
    gemm_tn(x, &dk, &mut g_wk, rows, c_in, d);
    gemm_tn(x, &dv, &mut g_wv, rows, c_in, d_v);
    let mut dx = vec![0.0; rows * c_in];
    gemm_nt(&dq, w.query.data(), &mut dx, rows, d, c_in);
    gemm_nt(&dk, w.key.data(), &mut dx, rows, d, c_in);
    gemm_nt(&dv, w.value.data(), &mut dx, rows, d_v, c_in);

    Ok(AttentionGrads {
        input: TensorF::new(trace.input.shape().to_vec(), dx)?,
        weights: AttentionWeights {
            query: TensorF::new(w.query.shape().to_vec(), g_wq)?,
            key: TensorF::new(w.key.shape().to_vec(), g_wk)?,
            value: TensorF::new(w.value.shape().to_vec(), g_wv)?,
            output: TensorF::new(w.output.shape().to_vec(), g_out_w)?,
            output_bias: TensorF::new(vec![c_out], g_bias)?,
        },
    })
}

/// Cross-frame attention pooled over time.
pub fn spatio_temporal_attention(
    f_all: &TensorF,
    w: &AttentionWeights,
    pooling: TemporalPooling,
) -> Result<(TensorF, AttentionTrace)> {
    attend(f_all, w, Wiring::AllFrames, pooling)
}

/// Per-frame non-local attention.
pub fn self_attention(q: &TensorF, w: &AttentionWeights) -> Result<(TensorF, AttentionTrace)> {
    attend(q, w, Wiring::SameFrame, TemporalPooling::Mean)
}

/// Backward pass of [`spatio_temporal_attention`] or [`self_attention`].
pub fn attention_backward(trace: &AttentionTrace, w: &AttentionWeights, grad_out: &TensorF) -> Result<AttentionGrads> {
    attend_backward(trace, w, grad_out)
}

/// The normalized map between query frame `query_t` and key frame `key_t`.
pub fn attention_map(x: &TensorF, w: &AttentionWeights, query_t: usize, key_t: usize) -> Result<AttentionMap> {
    let (t, h, wd, _) = x.dims4()?;
    let (_, d, _, _) = w.dims()?;
    if query_t >= t || key_t >= t {
        return Err(Error::Dimension(format!("frame index out of range for {t} frames")));
    }
    let p = h * wd;
    let q = project(x.frame(query_t), p, &w.query);
    let k = project(x.frame(key_t), p, &w.key);
    Ok(AttentionMap {
        weights: TensorF::new(vec![p, p], scores(&q, &k, p, d))?,
    })
}

/// Tag-based attention: pooled tags, 1×1 expansion, cross-frame attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TagAttentionWeights {
    /// `1 × E`
    pub expand: TensorF,
    /// `E`
    pub expand_bias: TensorF,
    pub attention: AttentionWeights,
}

impl TagAttentionWeights {
    pub fn init(expand: usize, d: usize, d_v: usize, c_out: usize, rng: &mut Rng) -> Self {
        TagAttentionWeights {
            expand: TensorF::randn(&[1, expand], 1.0, rng),
            expand_bias: TensorF::randn(&[expand], 0.5, rng),
            attention: AttentionWeights::init(expand, d, d_v, c_out, 1.0, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TagAttentionTrace {
    pooled: TensorF,
    factor: usize,
    inner: AttentionTrace,
}

#[derive(Clone, Debug)]
pub struct TagAttentionGrads {
    pub tags: TensorF,
    pub weights: TagAttentionWeights,
}

pub fn tag_based_attention(
    tags: &TensorF,
    feature_hw: (usize, usize),
    w: &TagAttentionWeights,
    pooling: TemporalPooling,
) -> Result<(TensorF, TagAttentionTrace)> {
    let (t, h, wd, c) = tags.dims4()?;
    if c != 1 {
        return Err(Error::Dimension(format!("tag volume must have one channel, got {c}")));
    }
    let (fh, fw) = feature_hw;
    if fh == 0 || fw == 0 || h % fh != 0 || wd % fw != 0 || h / fh != wd / fw {
        return Err(Error::Config(format!(
            "tag resolution {h}×{wd} is not an integer multiple of feature resolution {fh}×{fw}"
        )));
    }
    let factor = h / fh;
    let pooled = tensor::avg_pool_spatial(tags, factor)?;
    let e = w.expand.shape()[1];
    if w.expand.shape() != [1, e] || w.expand_bias.len() != e {
        return Err(Error::Config("tag expansion must be 1×E with E biases".into()));
    }
    let mut expanded = Vec::with_capacity(t * fh * fw * e);
    for &pv in pooled.data() {
        for (we, be) in w.expand.data().iter().zip(w.expand_bias.data()) {
            expanded.push(pv * we + be);
        }
    }
    let expanded = TensorF::new(vec![t, fh, fw, e], expanded)?;
    let (out, inner) = attend(&expanded, &w.attention, Wiring::AllFrames, pooling)?;
    Ok((
        out,
        TagAttentionTrace {
            pooled,
            factor,
            inner,
        },
    ))
}

pub fn tag_based_attention_backward(
    trace: &TagAttentionTrace,
    w: &TagAttentionWeights,
    grad_out: &TensorF,
) -> Result<TagAttentionGrads> {
    let inner = attend_backward(&trace.inner, &w.attention, grad_out)?;
    let e = w.expand.shape()[1];
    let mut g_expand = vec![0.0; e];
    let mut g_bias = vec![0.0; e];
    let mut g_pooled = Vec::with_capacity(trace.pooled.len());
    for (pv, ge) in trace.pooled.data().iter().zip(inner.input.data().chunks(e)) {
        let mut gp = 0.0;
        for j in 0..e {
            g_expand[j] += pv * ge[j];
            g_bias[j] += ge[j];
            gp += ge[j] * w.expand.data()[j];
        }
        g_pooled.push(gp);
    }
    let g_pooled = TensorF::new(trace.pooled.shape().to_vec(), g_pooled)?;
    Ok(TagAttentionGrads {
        tags: tensor::avg_pool_spatial_backward(&g_pooled, trace.factor)?,
        weights: TagAttentionWeights {
            expand: TensorF::new(vec![1, e], g_expand)?,
            expand_bias: TensorF::new(vec![e], g_bias)?,
            attention: inner.weights,
        },
    })
}

/// Append normalized x and y coordinate maps (each in `[−1, 1]`) as two
/// trailing channels.
pub fn add_coordinate_channels(f: &TensorF) -> Result<TensorF> {
    let (t, h, w, c) = f.dims4()?;
    let coord = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(t * h * w * (c + 2));
    for (pix, chunk) in f.data().chunks(c.max(1)).enumerate().take(t * h * w) {
        let y = (pix / w) % h;
        let x = pix % w;
        if c > 0 {
            out.extend_from_slice(chunk);
        }
        out.push(coord(x, w));
        out.push(coord(y, h));
    }
    TensorF::new(vec![t, h, w, c + 2], out)
}
