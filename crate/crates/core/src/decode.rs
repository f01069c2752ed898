//! From tags and decoder scores to clip-consistent instance masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LabelVolume, TagVolume};
use crate::model::ModelState;
use crate::network;
use crate::tensor::{self, TensorF};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Minimum distance between accepted tag modes.
    pub bandwidth: f64,
    /// Clusters with fewer pixels (over the whole clip) become background.
    pub min_pixels: usize,
    /// A pixel is foreground when its non-background probability reaches
    /// this value and its argmax class is not background.
    pub foreground_threshold: f64,
    /// Keep every `frame_stride`-th frame of long sequences; 0 spreads the
    /// network's frame budget uniformly over the sequence.
    pub frame_stride: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            bandwidth: 0.1,
            min_pixels: 20,
            foreground_threshold: 0.5,
            frame_stride: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth < 1.0) {
            return Err(Error::Config(format!("bandwidth {} must lie in (0, 1)", self.bandwidth)));
        }
        if !(self.foreground_threshold > 0.0 && self.foreground_threshold < 1.0) {
            return Err(Error::Config(format!(
                "foreground threshold {} must lie in (0, 1)",
                self.foreground_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedInstance {
    pub id: u32,
    pub class_id: u32,
    pub confidence: f64,
}

/// Decoded instances over a clip; the label volume keeps masks disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub labels: LabelVolume,
    pub instances: Vec<DecodedInstance>,
}

impl InstanceResult {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        InstanceResult {
            labels: LabelVolume::empty(frames, height, width),
            instances: Vec::new(),
        }
    }

    pub fn mask(&self, id: u32) -> Vec<bool> {
        self.labels.mask_of(id)
    }
}

const BINS: usize = 256;

fn bin_of(v: f64) -> usize {
    ((v * BINS as f64) as usize).min(BINS - 1)
}

fn bin_center(b: usize) -> f64 {
    (b as f64 + 0.5) / BINS as f64
}

/// Gaussian-smoothed histogram peaks, strongest first, at least `bandwidth`
/// apart.
fn find_modes(values: &[f64], bandwidth: f64) -> Vec<f64> {
    let mut hist = [0.0f64; BINS];
    for &v in values {
        hist[bin_of(v)] += 1.0;
    }
    let sigma = bandwidth / 4.0 * BINS as f64;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let mut smooth = [0.0f64; BINS];
    for (i, s) in smooth.iter_mut().enumerate() {
        for (k, kv) in kernel.iter().enumerate() {
            let j = i as isize + k as isize - radius;
            if (0..BINS as isize).contains(&j) {
                *s += kv * hist[j as usize];
            }
        }
    }
    let mut peaks: Vec<usize> = (0..BINS)
        .filter(|&i| {
            let left = if i == 0 { 0.0 } else { smooth[i - 1] };
            let right = if i + 1 == BINS { 0.0 } else { smooth[i + 1] };
            smooth[i] > 0.0 && smooth[i] > left && smooth[i] >= right
        })
        .collect();
    peaks.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));
    let mut modes: Vec<f64> = Vec::new();
    for p in peaks {
        let c = bin_center(p);
        // A small slack keeps exact-bandwidth separations from flipping on
        // bin rounding.
        if modes.iter().all(|m| (m - c).abs() >= bandwidth - 0.5 / BINS as f64) {
            modes.push(c);
        }
    }
    modes.sort_by(f64::total_cmp);
    modes
}

/// Groups foreground pixels of the whole clip by their tag value.
///
/// Cluster labels start at 1 and increase with the mode's tag value, so the
/// same label means the same instance in every frame.
pub fn cluster_tags(tags: &TagVolume, foreground: &[bool], cfg: &DecodeConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    let (t, h, w, _) = tags.tensor().dims4()?;
    if foreground.len() != t * h * w {
        return Err(Error::Dimension(format!(
            "foreground has {} pixels, tags have {}",
            foreground.len(),
            t * h * w
        )));
    }
    let values = tags.values();
    let fg: Vec<f64> = values.iter().zip(foreground).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
    if fg.is_empty() {
        return Ok(LabelVolume::empty(t, h, w));
    }
    let modes = find_modes(&fg, cfg.bandwidth);
    let nearest = |v: f64| {
        let mut best = 0;
        for (k, m) in modes.iter().enumerate() {
            if (v - m).abs() < (v - modes[best]).abs() {
                best = k;
            }
        }
        best
    };
    let mut assign: Vec<Option<usize>> = values
        .iter()
        .zip(foreground)
        .map(|(&v, &f)| f.then(|| nearest(v)))
        .collect();
    let mut counts = vec![0usize; modes.len()];
    for k in assign.iter().flatten() {
        counts[*k] += 1;
    }
    let mut relabel = vec![0u32; modes.len()];
    let mut next = 1;
    for (k, &c) in counts.iter().enumerate() {
        if c >= cfg.min_pixels.max(1) {
            relabel[k] = next;
            next += 1;
        }
    }
    let labels = assign.iter_mut().map(|a| a.map_or(0, |k| relabel[k])).collect();
    LabelVolume::new(t, h, w, labels)
}

/// Foreground gate from decoder logits `T×H×W×(C+1)`.
pub fn foreground_from_scores(scores: &TensorF, cfg: &DecodeConfig) -> Result<Vec<bool>> {
    let (_, _, _, c) = scores.dims4()?;
    if c < 2 {
        return Err(Error::Dimension("scores need a background and at least one class".into()));
    }
    let mut out = Vec::with_capacity(scores.len() / c);
    let mut p = vec![0.0; c];
    for px in scores.data().chunks(c) {
        p.copy_from_slice(px);
        tensor::softmax_in_place(&mut p);
        let arg = argmax(&p);
        out.push(arg != 0 && 1.0 - p[0] >= cfg.foreground_threshold);
    }
    Ok(out)
}

/// First index of the largest value.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Majority class per cluster (ties to the lower class id) and the mean
/// probability of that class as confidence.
pub fn assign_classes(labels: &LabelVolume, scores: &TensorF) -> Result<InstanceResult> {
    let (t, h, w, c) = scores.dims4()?;
    if (t, h, w) != (labels.frames, labels.height, labels.width) {
        return Err(Error::Dimension(format!(
            "scores {t}×{h}×{w} vs labels {}×{}×{}",
            labels.frames, labels.height, labels.width
        )));
    }
    if c < 2 {
        return Err(Error::Dimension("scores need a background and at least one class".into()));
    }
    let n_ids = labels.labels.iter().copied().max().unwrap_or(0) as usize;
    let mut votes = vec![vec![0usize; c]; n_ids + 1];
    let mut prob_sum = vec![vec![0.0f64; c]; n_ids + 1];
    let mut p = vec![0.0; c];
    for (&l, px) in labels.labels.iter().zip(scores.data().chunks(c)) {
        if l == 0 {
            continue;
        }
        p.copy_from_slice(px);
        tensor::softmax_in_place(&mut p);
        let cls = 1 + argmax(&p[1..]);
        votes[l as usize][cls] += 1;
        for (s, v) in prob_sum[l as usize].iter_mut().zip(&p) {
            *s += v;
        }
    }
    let mut instances = Vec::new();
    for id in 1..=n_ids {
        let total: usize = votes[id].iter().sum();
        if total == 0 {
            continue;
        }
        let cls = 1 + argmax(&votes[id][1..].iter().map(|&v| v as f64).collect::<Vec<_>>());
        instances.push(DecodedInstance {
            id: id as u32,
            class_id: cls as u32,
            confidence: prob_sum[id][cls] / total as f64,
        });
    }
    Ok(InstanceResult {
        labels: labels.clone(),
        instances,
    })
}

/// Squared Euclidean distance from every pixel to the nearest pixel whose
/// mask value equals `target` (infinite when there is none).
pub(crate) fn squared_distance(mask: &[bool], h: usize, w: usize, target: bool) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m == target { 0.0 } else { INF }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid[y * w + x]));
        lower_envelope(&line, &mut out);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&grid[y * w..(y + 1) * w]);
        lower_envelope(&line, &mut out);
        grid[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    grid
}

/// One-dimensional squared distance transform by the lower envelope of
/// parabolas.
fn lower_envelope(f: &[f64], d: &mut Vec<f64>) {
    let n = f.len();
    d.clear();
    d.resize(n, 0.0);
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *dq = diff * diff + f[v[k]];
    }
}

/// Signed distance, positive inside: ±(distance to the other region − ½).
pub fn signed_distance(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let to_out = squared_distance(mask, h, w, false);
    let to_in = squared_distance(mask, h, w, true);
    mask.iter()
        .zip(to_out.iter().zip(&to_in))
        .map(|(&m, (o, i))| if m { o.sqrt() - 0.5 } else { -(i.sqrt() - 0.5) })
        .collect()
}

/// Mask centroid in pixel-index coordinates.
fn centroid(mask: &[bool], w: usize) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % w) as f64;
        sy += (i / w) as f64;
        n += 1.0;
    }
    (sx / n, sy / n)
}

/// Bilinear sample of a field with coordinates clamped to the frame.
fn sample(field: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| field[yy * w + xx];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Fills the frames between kept frames.
///
/// `result` holds one frame per entry of `kept`; the output has `total`
/// frames. Per instance and skipped frame the signed distance fields of the
/// two endpoint masks are first shifted along the centroid motion to the
/// in-between position, then blended linearly and thresholded at 0, so a
/// translating mask keeps its shape. An instance
/// present at only one endpoint is copied from it while within half the gap.
/// Overlaps go to the instance with the larger blended distance.
pub fn interpolate_skipped_frames(result: &InstanceResult, kept: &[usize], total: usize) -> Result<InstanceResult> {
    let lv = &result.labels;
    if lv.frames != kept.len() {
        return Err(Error::Contract(format!(
            "{} kept indices for {} decoded frames",
            kept.len(),
            lv.frames
        )));
    }
    if kept.first() != Some(&0) || kept.last() != Some(&(total.max(1) - 1)) || kept.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Contract(
            "kept frames must be strictly increasing and include the first and last frame".into(),
        ));
    }
    let (h, w) = (lv.height, lv.width);
    let n = h * w;
    let mut labels = vec![0u32; total * n];
    for (k, &t) in kept.iter().enumerate() {
        labels[t * n..(t + 1) * n].copy_from_slice(lv.frame(k));
    }
    let ids: Vec<u32> = result.instances.iter().map(|i| i.id).collect();
    for k in 0..kept.len().saturating_sub(1) {
        let (t0, t1) = (kept[k], kept[k + 1]);
        if t1 - t0 < 2 {
            continue;
        }
        type Field = Option<(Vec<f64>, (f64, f64))>;
        let fields: Vec<(Field, Field)> = ids
            .iter()
            .map(|&id| {
                let sdf = |frame: &[u32]| {
                    let m: Vec<bool> = frame.iter().map(|&l| l == id).collect();
                    m.iter().any(|&b| b).then(|| (signed_distance(&m, h, w), centroid(&m, w)))
                };
                (sdf(lv.frame(k)), sdf(lv.frame(k + 1)))
            })
            .collect();
        let gap = (t1 - t0) as f64;
        for t in t0 + 1..t1 {
            let a = (t - t0) as f64 / gap;
            let out = &mut labels[t * n..(t + 1) * n];
            let mut best = vec![0.0f64; n];
            for (&id, (s0, s1)) in ids.iter().zip(&fields) {
                let blended: Option<Vec<f64>> = match (s0, s1) {
                    (Some((a0, c0)), Some((a1, c1))) => {
                        let (dx, dy) = (c1.0 - c0.0, c1.1 - c0.1);
                        Some(
                            (0..n)
                                .map(|i| {
                                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                                    let v0 = sample(a0, h, w, x - a * dx, y - a * dy);
                                    let v1 = sample(a1, h, w, x + (1.0 - a) * dx, y + (1.0 - a) * dy);
                                    (1.0 - a) * v0 + a * v1
                                })
                                .collect(),
                        )
                    }
                    (Some((a0, _)), None) if (t - t0) as f64 <= gap / 2.0 => Some(a0.clone()),
                    (None, Some((a1, _))) if (t1 - t) as f64 <= gap / 2.0 => Some(a1.clone()),
                    _ => None,
                };
                let Some(b) = blended else { continue };
                for ((o, bv), s) in out.iter_mut().zip(best.iter_mut()).zip(&b) {
                    if *s > 0.0 && *s > *bv {
                        *bv = *s;
                        *o = id;
                    }
                }
            }
        }
    }
    Ok(InstanceResult {
        labels: LabelVolume::new(total, h, w, labels)?,
        instances: result.instances.clone(),
    })
}

/// Output of [`run_inference`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub result: InstanceResult,
    /// Frames fed to the network, in sequence order.
    pub kept: Vec<usize>,
    /// Frames filled by interpolation (or copied after the last kept frame).
    pub interpolated: Vec<usize>,
}

/// Sequence frames fed to a network that takes `t` frames.
pub fn kept_frames(len: usize, t: usize, stride: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Config("empty sequence".into()));
    }
    if len <= t {
        return Ok((0..len).collect());
    }
    if stride > 0 {
        let kept: Vec<usize> = (0..len).step_by(stride).collect();
        if kept.len() > t {
            return Err(Error::Config(format!(
                "stride {stride} keeps {} of {len} frames but the network takes {t}",
                kept.len()
            )));
        }
        return Ok(kept);
    }
    Ok((0..t).map(|k| k * len / t).collect())
}

/// Subsamples, runs the network, decodes and fills skipped frames.
pub fn run_inference(frames: &TensorF, state: &ModelState, cfg: &DecodeConfig) -> Result<Inference> {
    cfg.validate()?;
    let net = state.config();
    let (len, h, w, c) = frames.dims4()?;
    if (h, w, c) != (net.height, net.width, 3) {
        return Err(Error::Config(format!(
            "frames are {h}×{w}×{c} but the model expects {}×{}×3",
            net.height, net.width
        )));
    }
    if net.ablation.no_decoder {
        return Err(Error::Config("decoding needs the semantic decoder branch".into()));
    }
    let kept = kept_frames(len, net.frames, cfg.frame_stride)?;
    // Short inputs are looped up to the network's frame count.
    let mut input = Vec::with_capacity(net.frames * h * w * 3);
    for k in 0..net.frames {
        input.extend_from_slice(frames.frame(kept[k % kept.len()]));
    }
    let input = TensorF::new(vec![net.frames, h, w, 3], input)?;
    let (tags, scores, _) = network::forward(&input, state)?;
    let scores = scores.expect("decoder is active");

    let used = kept.len();
    let take = |x: &TensorF| -> Result<TensorF> {
        let per = x.len() / x.shape()[0];
        let mut shape = x.shape().to_vec();
        shape[0] = used;
        TensorF::new(shape, x.data()[..used * per].to_vec())
    };
    let tags = tensor::upsample_nearest(&take(tags.tensor())?, net.tag_downsample())?;
    let scores = take(&scores)?;
    let foreground = foreground_from_scores(&scores, cfg)?;
    let labels = cluster_tags(&TagVolume::new(tags)?, &foreground, cfg)?;
    let decoded = assign_classes(&labels, &scores)?;

    // Frames after the last kept one repeat its masks.
    let mut kept_ext = kept.clone();
    let mut decoded = decoded;
    let last = *kept.last().expect("non-empty");
    if last + 1 < len {
        let n = h * w;
        let mut lab = decoded.labels.labels.clone();
        lab.extend_from_slice(&decoded.labels.labels[(used - 1) * n..used * n]);
        decoded.labels = LabelVolume::new(used + 1, h, w, lab)?;
        kept_ext.push(len - 1);
    }
    let result = interpolate_skipped_frames(&decoded, &kept_ext, len)?;
    let interpolated = (0..len).filter(|t| !kept.contains(t)).collect();
    Ok(Inference {
        result,
        kept,
        interpolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn tags_from(values: Vec<f64>, t: usize, h: usize, w: usize) -> TagVolume {
        TagVolume::new(TensorF::new(vec![t, h, w, 1], values).unwrap()).unwrap()
    }

    fn cfg() -> DecodeConfig {
        DecodeConfig {
            bandwidth: 0.2,
            min_pixels: 1,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn two_well_separated_groups() {
        // Left half 0.1, right half 0.8, in two frames.
        let mut v = Vec::new();
        for _ in 0..2 {
            for x in 0..8 {
                v.push(if x < 4 { 0.1 } else { 0.8 });
            }
        }
        let lv = cluster_tags(&tags_from(v, 2, 1, 8), &[true; 16], &cfg()).unwrap();
        assert_eq!(lv.frame(0), &[1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(lv.frame(1), lv.frame(0));
    }

    #[test]
    fn single_value_is_one_cluster_and_empty_is_empty() {
        let lv = cluster_tags(&tags_from(vec![0.42; 9], 1, 3, 3), &[true; 9], &cfg()).unwrap();
        assert!(lv.labels.iter().all(|&l| l == 1));
        let lv = cluster_tags(&tags_from(vec![0.42; 9], 1, 3, 3), &[false; 9], &cfg()).unwrap();
        assert!(lv.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn small_clusters_are_dropped() {
        let mut v = vec![0.2; 30];
        v.extend([0.9; 3]);
        let c = DecodeConfig {
            min_pixels: 5,
            ..cfg()
        };
        let lv = cluster_tags(&tags_from(v, 1, 1, 33), &[true; 33], &c).unwrap();
        assert!(lv.labels[..30].iter().all(|&l| l == 1));
        assert!(lv.labels[30..].iter().all(|&l| l == 0));
    }

    /// Best 2-means split of 1-D data by exhaustive threshold search.
    fn two_means(values: &[f64]) -> Vec<u32> {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..sorted.len() {
            let (a, b) = sorted.split_at(i);
            let cost = |s: &[f64]| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            };
            let c = cost(a) + cost(b);
            if c < best.0 {
                best = (c, (a[a.len() - 1] + b[0]) / 2.0);
            }
        }
        values.iter().map(|&v| if v < best.1 { 1 } else { 2 }).collect()
    }

    #[test]
    fn gaussian_mixture_matches_two_means() {
        let mut rng = Rng::new(11);
        let normal = rand_distr::Normal::new(0.0, 0.02).unwrap();
        use rand_distr::Distribution;
        let v: Vec<f64> = (0..4000)
            .map(|i| {
                let m: f64 = if i % 2 == 0 { 0.3 } else { 0.7 };
                (m + normal.sample(rng.inner())).clamp(0.0, 1.0)
            })
            .collect();
        let oracle = two_means(&v);
        let lv = cluster_tags(&tags_from(v, 1, 40, 100), &[true; 4000], &DecodeConfig::default()).unwrap();
        let agree = lv.labels.iter().zip(&oracle).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.99 * 4000.0, "{agree}");
    }

    proptest! {
        #[test]
        fn cluster_count_survives_affine_maps(
            centers in proptest::collection::btree_set(0usize..4, 1..4),
            scale in 0.8f64..1.0,
            shift in 0.0f64..0.05,
        ) {
            // Centres on a 0.3 grid stay ≥ 0.24 apart after scaling, above
            // the 0.2 bandwidth.
            let base: Vec<f64> = centers.iter().map(|&c| 0.02 + c as f64 * 0.3).collect();
            let mut v = Vec::new();
            for (k, &b) in base.iter().enumerate() {
                for j in 0..20 {
                    v.push(b + 0.002 * ((j + k) % 5) as f64);
                }
            }
            let n = v.len();
            let c = cfg();
            let count = |vals: Vec<f64>| {
                let lv = cluster_tags(&tags_from(vals, 1, 1, n), &vec![true; n], &c).unwrap();
                *lv.labels.iter().max().unwrap()
            };
            let direct = count(v.clone());
            prop_assert_eq!(direct as usize, base.len());
            let mapped: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
            prop_assert_eq!(count(mapped), direct);
            let flipped: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
            prop_assert_eq!(count(flipped), direct);
        }
    }

    fn scores_for(classes: &[usize], c: usize) -> TensorF {
        let mut s = Vec::new();
        for &k in classes {
            for j in 0..c {
                s.push(if j == k { 3.0 } else { 0.0 });
            }
        }
        TensorF::new(vec![1, 1, classes.len(), c], s).unwrap()
    }

    #[test]
    fn class_assignment_rules() {
        let lv = LabelVolume::new(1, 1, 5, vec![1, 1, 1, 1, 1]).unwrap();
        let r = assign_classes(&lv, &scores_for(&[2, 2, 2, 2, 2], 4)).unwrap();
        let p = 3f64.exp() / (3f64.exp() + 3.0);
        assert_eq!(r.instances.len(), 1);
        assert_eq!(r.instances[0].class_id, 2);
        assert!((r.instances[0].confidence - p).abs() < 1e-12);

        let r = assign_classes(&lv, &scores_for(&[1, 1, 3, 3, 3], 4)).unwrap();
        assert_eq!(r.instances[0].class_id, 3);

        let lv = LabelVolume::new(1, 1, 4, vec![1, 1, 1, 1]).unwrap();
        let r = assign_classes(&lv, &scores_for(&[3, 3, 1, 1], 4)).unwrap();
        assert_eq!(r.instances[0].class_id, 1);
    }

    #[test]
    fn foreground_gate() {
        let s = scores_for(&[0, 1, 2], 3);
        assert_eq!(foreground_from_scores(&s, &DecodeConfig::default()).unwrap(), vec![false, true, true]);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let (h, w) = (rng.int_inclusive(1, 9), rng.int_inclusive(1, 9));
            let m: Vec<bool> = (0..h * w).map(|_| rng.bernoulli(0.3)).collect();
            let d = squared_distance(&m, h, w, true);
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::INFINITY;
                    for yy in 0..h {
                        for xx in 0..w {
                            if m[yy * w + xx] {
                                best = best.min(((y as f64 - yy as f64).powi(2)) + (x as f64 - xx as f64).powi(2));
                            }
                        }
                    }
                    if best.is_finite() {
                        assert_eq!(d[y * w + x], best);
                    } else {
                        assert!(d[y * w + x] >= 1e19);
                    }
                }
            }
        }
    }

    fn square(h: usize, w: usize, x0: usize, y0: usize, side: usize) -> Vec<u32> {
        let mut v = vec![0; h * w];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                v[y * w + x] = 1;
            }
        }
        v
    }

    fn one(id: u32) -> Vec<DecodedInstance> {
        vec![DecodedInstance {
            id,
            class_id: 1,
            confidence: 1.0,
        }]
    }

    #[test]
    fn identical_endpoints_give_identical_masks() {
        let f = square(12, 12, 2, 3, 5);
        let mut lab = f.clone();
        lab.extend(&f);
        let r = InstanceResult {
            labels: LabelVolume::new(2, 12, 12, lab).unwrap(),
            instances: one(1),
        };
        let out = interpolate_skipped_frames(&r, &[0, 4], 5).unwrap();
        for t in 0..5 {
            assert_eq!(out.labels.frame(t), &f[..]);
        }
    }

    #[test]
    fn translating_square_centroids() {
        let (h, w) = (20, 40);
        let mut lab = square(h, w, 4, 5, 10);
        lab.extend(square(h, w, 12, 5, 10));
        let r = InstanceResult {
            labels: LabelVolume::new(2, h, w, lab).unwrap(),
            instances: one(1),
        };
        let out = interpolate_skipped_frames(&r, &[0, 4], 5).unwrap();
        for t in 0..5 {
            let m = out.labels.frame(t);
            let (mut sx, mut n) = (0.0, 0.0);
            for (i, &l) in m.iter().enumerate() {
                if l == 1 {
                    sx += (i % w) as f64;
                    n += 1.0;
                }
            }
            let expect = 4.0 + 4.5 + 2.0 * t as f64;
            assert!((sx / n - expect).abs() <= 1.0, "t={t}: {}", sx / n);
        }
    }

    #[test]
    fn diagonal_translation_keeps_the_shape() {
        let (h, w) = (24, 32);
        let mut lab = square(h, w, 2, 3, 8);
        lab.extend(square(h, w, 14, 11, 8));
        let r = InstanceResult {
            labels: LabelVolume::new(2, h, w, lab).unwrap(),
            instances: one(1),
        };
        let out = interpolate_skipped_frames(&r, &[0, 4], 5).unwrap();
        for t in 1..4 {
            assert_eq!(out.labels.frame(t), &square(h, w, 2 + 3 * t, 3 + 2 * t, 8)[..], "t={t}");
        }
    }

    #[test]
    fn absence_rules() {
        let (h, w) = (6, 6);
        let a = square(h, w, 1, 1, 3);
        let mut lab = a.clone();
        lab.extend(vec![0; h * w]);
        let r = InstanceResult {
            labels: LabelVolume::new(2, h, w, lab).unwrap(),
            instances: one(1),
        };
        let out = interpolate_skipped_frames(&r, &[0, 4], 5).unwrap();
        assert_eq!(out.labels.frame(1), &a[..]);
        assert_eq!(out.labels.frame(2), &a[..]);
        assert!(out.labels.frame(3).iter().all(|&l| l == 0));

        let r = InstanceResult {
            labels: LabelVolume::empty(2, h, w),
            instances: one(1),
        };
        let out = interpolate_skipped_frames(&r, &[0, 3], 4).unwrap();
        assert!(out.labels.labels.iter().all(|&l| l == 0));
        assert!(matches!(
            interpolate_skipped_frames(&r, &[1, 3], 4),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kept_frame_rules() {
        assert_eq!(kept_frames(8, 8, 0).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(kept_frames(16, 8, 0).unwrap(), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(kept_frames(5, 8, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(kept_frames(20, 8, 3).unwrap(), vec![0, 3, 6, 9, 12, 15, 18]);
        assert!(kept_frames(20, 4, 3).is_err());
    }
}
