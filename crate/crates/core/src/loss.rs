//! Spatio-temporal tagging loss and the semantic cross-entropy term.
//!
//! Every component returns its value together with the analytic gradient
//! with respect to its input tensor. Instance means are taken over all of an
//! instance's pixels; only the comparison pixels of the spatial pull term are
//! sampled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::TensorF;

/// Per-pixel instance ids over a clip; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(frames: usize, height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != frames * height * width {
            return Err(Error::Dimension(format!(
                "label volume {frames}×{height}×{width} holds {} labels",
                labels.len()
            )));
        }
        Ok(LabelVolume {
            frames,
            height,
            width,
            labels,
        })
    }

    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        LabelVolume {
            frames,
            height,
            width,
            labels: vec![0; frames * height * width],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        let n = self.frame_len();
        &self.labels[t * n..(t + 1) * n]
    }

    /// Binary mask of one id, frame-major.
    pub fn mask_of(&self, id: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    /// Nearest-neighbour resampling to a coarser grid (centre sample of each cell).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "{}×{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(self.frames * h * w);
        for t in 0..self.frames {
            for y in 0..h {
                for x in 0..w {
                    let sy = y * factor + factor / 2;
                    let sx = x * factor + factor / 2;
                    out.push(self.labels[(t * self.height + sy) * self.width + sx]);
                }
            }
        }
        LabelVolume::new(self.frames, h, w, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u32,
    pub class_id: u32,
}

/// Ground-truth instances of a clip. Masks are disjoint by construction since
/// they are stored as one label volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceGT {
    pub volume: LabelVolume,
    pub instances: Vec<InstanceInfo>,
}

/// Flat pixel indices of one instance, overall and per frame.
#[derive(Clone, Debug, Default)]
pub struct PixelSet {
    pub all: Vec<usize>,
    pub per_frame: Vec<Vec<usize>>,
}

impl InstanceGT {
    pub fn new(volume: LabelVolume, instances: Vec<InstanceInfo>) -> Result<Self> {
        let gt = InstanceGT { volume, instances };
        gt.validate()?;
        Ok(gt)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for inst in &self.instances {
            if inst.id == 0 {
                return Err(Error::Label("instance id 0 is reserved for background".into()));
            }
            if !seen.insert(inst.id) {
                return Err(Error::Label(format!("duplicate instance id {}", inst.id)));
            }
        }
        let mut present = std::collections::BTreeSet::new();
        for &l in &self.volume.labels {
            if l != 0 {
                present.insert(l);
            }
        }
        for l in &present {
            if !seen.contains(l) {
                return Err(Error::Label(format!("label {l} has no instance entry")));
            }
        }
        for id in &seen {
            if !present.contains(id) {
                return Err(Error::AbsentInstance(*id));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.volume.frames
    }

    /// Pixel sets in instance-list order.
    pub fn pixel_sets(&self) -> Vec<PixelSet> {
        let mut slot = std::collections::HashMap::new();
        for (i, inst) in self.instances.iter().enumerate() {
            slot.insert(inst.id, i);
        }
        let mut sets: Vec<PixelSet> = (0..self.instances.len())
            .map(|_| PixelSet {
                all: Vec::new(),
                per_frame: vec![Vec::new(); self.volume.frames],
            })
            .collect();
        let n = self.volume.frame_len();
        for (idx, &l) in self.volume.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let s = &mut sets[slot[&l]];
            s.all.push(idx);
            s.per_frame[idx / n].push(idx);
        }
        sets
    }

    /// Per-pixel class ids (background 0).
    pub fn class_map(&self) -> Vec<u32> {
        let classes: std::collections::HashMap<u32, u32> =
            self.instances.iter().map(|i| (i.id, i.class_id)).collect();
        self.volume
            .labels
            .iter()
            .map(|&l| if l == 0 { 0 } else { classes[&l] })
            .collect()
    }

    /// Ground truth on a coarser grid; instances that vanish are dropped.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let volume = self.volume.downsample(factor)?;
        let present: std::collections::BTreeSet<u32> =
            volume.labels.iter().copied().filter(|&l| l != 0).collect();
        let instances = self
            .instances
            .iter()
            .copied()
            .filter(|i| present.contains(&i.id))
            .collect();
        InstanceGT::new(volume, instances)
    }
}

/// Per-pixel scalar tags, `T×H×W×1`, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TagVolume {
    tags: TensorF,
}

impl TagVolume {
    pub fn new(tags: TensorF) -> Result<Self> {
        let (_, _, _, c) = tags.dims4()?;
        if c != 1 {
            return Err(Error::Dimension(format!("tags need one channel, got {c}")));
        }
        if let Some(v) = tags.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("tag value {v} outside [0, 1]")));
        }
        Ok(TagVolume { tags })
    }

    pub fn tensor(&self) -> &TensorF {
        &self.tags
    }

    pub fn values(&self) -> &[f64] {
        self.tags.data()
    }

    pub fn into_tensor(self) -> TensorF {
        self.tags
    }

    fn check_against(&self, gt: &InstanceGT) -> Result<()> {
        let (t, h, w, _) = self.tags.dims4()?;
        let v = &gt.volume;
        if (t, h, w) != (v.frames, v.height, v.width) {
            return Err(Error::Dimension(format!(
                "tags {t}×{h}×{w} vs ground truth {}×{}×{}",
                v.frames, v.height, v.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentWeights {
    pub spectra: f64,
    pub specter: f64,
    pub tempra: f64,
    pub temper: f64,
    pub crossentropy: f64,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        ComponentWeights {
            spectra: 1.0,
            specter: 1.0,
            tempra: 1.0,
            temper: 1.0,
            crossentropy: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Separation margin between instance mean tags.
    pub margin: f64,
    /// Comparison pixels sampled per instance in the spatial pull term.
    pub samples_per_instance: usize,
    /// Instances taking part in the per-frame separation term.
    pub separation_subset: usize,
    pub weights: ComponentWeights,
    pub rng_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 3.0,
            samples_per_instance: 64,
            separation_subset: 8,
            weights: ComponentWeights::default(),
            rng_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if self.samples_per_instance == 0 {
            return Err(Error::Config("samples_per_instance must be ≥ 1".into()));
        }
        if self.separation_subset < 2 {
            return Err(Error::Config("separation_subset must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Identifies one loss evaluation so pixel sampling is reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleKey {
    pub clip: u64,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_spectra: f64,
    pub l_specter: f64,
    pub l_tempra: f64,
    pub l_temper: f64,
    pub l_tag: f64,
    pub l_crossentropy: f64,
    pub l_overall: f64,
}

impl LossBreakdown {
    pub fn from_components(spectra: f64, specter: f64, tempra: f64, temper: f64, crossentropy: f64) -> Self {
        let l_tag = spectra + specter + tempra + temper;
        LossBreakdown {
            l_spectra: spectra,
            l_specter: specter,
            l_tempra: tempra,
            l_temper: temper,
            l_tag,
            l_crossentropy: crossentropy,
            l_overall: l_tag + crossentropy,
        }
    }
}

/// A scalar loss and its gradient with respect to the input.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: TensorF,
}

impl LossValue {
    fn zero(shape: &[usize]) -> Self {
        LossValue {
            value: 0.0,
            grad: TensorF::zeros(shape),
        }
    }
}

/// Frame range for [`mean_tag`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frames {
    All,
    Single(usize),
}

fn mean_of(tags: &[f64], pixels: &[usize]) -> f64 {
    pixels.iter().map(|&i| tags[i]).sum::<f64>() / pixels.len() as f64
}

/// Mean tag of an instance over the whole clip or one frame.
pub fn mean_tag(tags: &TagVolume, pixels: &PixelSet, frames: Frames, id: u32) -> Result<f64> {
    let sel: &[usize] = match frames {
        Frames::All => &pixels.all,
        Frames::Single(t) => pixels.per_frame.get(t).map(Vec::as_slice).unwrap_or(&[]),
    };
    if sel.is_empty() {
        return Err(Error::AbsentInstance(id));
    }
    Ok(mean_of(tags.values(), sel))
}

/// Spread `dL/dmean` evenly over the pixels that formed the mean.
fn spread(grad: &mut [f64], pixels: &[usize], d_mean: f64) {
    let g = d_mean / pixels.len() as f64;
    for &i in pixels {
        grad[i] += g;
    }
}

/// Hinge `max(0, G − |a − b|)` and its derivative with respect to `a`.
/// The derivative is zero at both kinks.
fn hinge(a: f64, b: f64, margin: f64) -> (f64, f64) {
    let d = a - b;
    let v = margin - d.abs();
    if v <= 0.0 {
        return (0.0, 0.0);
    }
    let slope = if d > 0.0 {
        -1.0
    } else if d < 0.0 {
        1.0
    } else {
        0.0
    };
    (v, slope)
}

/// Pull sampled pixels of each instance toward the instance mean tag.
pub fn spatial_intra_loss(tags: &TagVolume, gt: &InstanceGT, cfg: &LossConfig, key: SampleKey) -> Result<LossValue> {
    tags.check_against(gt)?;
    let shape = tags.tensor().shape();
    if gt.is_empty() {
        log::warn!("spatial pull term evaluated on a clip without instances");
        return Ok(LossValue::zero(shape));
    }
    let x = tags.values();
    let sets = gt.pixel_sets();
    let n_inst = sets.len() as f64;
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for (n, set) in sets.iter().enumerate() {
        let h = mean_of(x, &set.all);
        let mut rng = Rng::derive(cfg.rng_seed, &[key.clip, key.step, 0, n as u64]);
        let picks = rng.sample_indices(set.all.len(), cfg.samples_per_instance);
        let mut d_mean = 0.0;
        for &k in &picks {
            let j = set.all[k];
            let diff = h - x[j];
            total += diff * diff;
            d_mean += 2.0 * diff;
            grad[j] -= 2.0 * diff / n_inst;
        }
        spread(&mut grad, &set.all, d_mean / n_inst);
    }
    Ok(LossValue {
        value: total / n_inst,
        grad: TensorF::new(shape.to_vec(), grad)?,
    })
}

/// Hinge push between the clip-level mean tags of every instance pair.
pub fn spatial_inter_loss(tags: &TagVolume, gt: &InstanceGT, cfg: &LossConfig) -> Result<LossValue> {
    tags.check_against(gt)?;
    let shape = tags.tensor().shape();
    if gt.len() < 2 {
        return Ok(LossValue::zero(shape));
    }
    let x = tags.values();
    let sets = gt.pixel_sets();
    let means: Vec<f64> = sets.iter().map(|s| mean_of(x, &s.all)).collect();
    let mut d_means = vec![0.0; means.len()];
    let mut total = 0.0;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let (v, slope) = hinge(means[a], means[b], cfg.margin);
            total += v;
            d_means[a] += slope;
            d_means[b] -= slope;
        }
    }
    let mut grad = vec![0.0; x.len()];
    for (set, &d) in sets.iter().zip(&d_means) {
        if d != 0.0 {
            spread(&mut grad, &set.all, d);
        }
    }
    Ok(LossValue {
        value: total,
        grad: TensorF::new(shape.to_vec(), grad)?,
    })
}

/// Pull each per-frame instance mean toward the clip-level mean.
pub fn temporal_grouping_loss(tags: &TagVolume, gt: &InstanceGT) -> Result<LossValue> {
    tags.check_against(gt)?;
    let shape = tags.tensor().shape();
    if gt.is_empty() {
        log::warn!("temporal grouping term evaluated on a clip without instances");
        return Ok(LossValue::zero(shape));
    }
    let x = tags.values();
    let sets = gt.pixel_sets();
    let n_inst = sets.len() as f64;
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for set in &sets {
        let h = mean_of(x, &set.all);
        let mut d_clip = 0.0;
        for frame in set.per_frame.iter().filter(|f| !f.is_empty()) {
            let diff = h - mean_of(x, frame);
            total += diff * diff;
            d_clip += 2.0 * diff;
            spread(&mut grad, frame, -2.0 * diff / n_inst);
        }
        spread(&mut grad, &set.all, d_clip / n_inst);
    }
    Ok(LossValue {
        value: total / n_inst,
        grad: TensorF::new(shape.to_vec(), grad)?,
    })
}

/// Positions (in instance-list order) taking part in the separation term.
pub fn separation_subset(n: usize, cfg: &LossConfig, key: SampleKey) -> Vec<usize> {
    if n <= cfg.separation_subset {
        return (0..n).collect();
    }
    let mut rng = Rng::derive(cfg.rng_seed, &[key.clip, key.step, 1]);
    rng.sample_indices(n, cfg.separation_subset)
}

/// Per-frame hinge push between instances of a sampled subset, over frames
/// where both instances are visible.
pub fn temporal_separation_loss(
    tags: &TagVolume,
    gt: &InstanceGT,
    cfg: &LossConfig,
    key: SampleKey,
) -> Result<LossValue> {
    tags.check_against(gt)?;
    let shape = tags.tensor().shape();
    if gt.len() < 2 {
        return Ok(LossValue::zero(shape));
    }
    let x = tags.values();
    let sets = gt.pixel_sets();
    let subset = separation_subset(sets.len(), cfg, key);
    let frames = gt.frames();
    let frame_means: Vec<Vec<Option<f64>>> = sets
        .iter()
        .map(|s| {
            s.per_frame
                .iter()
                .map(|f| (!f.is_empty()).then(|| mean_of(x, f)))
                .collect()
        })
        .collect();
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for (i, &a) in subset.iter().enumerate() {
        for &b in &subset[i + 1..] {
            for t in 0..frames {
                let (Some(ha), Some(hb)) = (frame_means[a][t], frame_means[b][t]) else {
                    continue;
                };
                let (v, slope) = hinge(ha, hb, cfg.margin);
                total += v;
                if slope != 0.0 {
                    spread(&mut grad, &sets[a].per_frame[t], slope);
                    spread(&mut grad, &sets[b].per_frame[t], -slope);
                }
            }
        }
    }
    Ok(LossValue {
        value: total,
        grad: TensorF::new(shape.to_vec(), grad)?,
    })
}

/// Weighted sum of the four tagging components and its gradient.
pub fn tagging_loss(
    tags: &TagVolume,
    gt: &InstanceGT,
    cfg: &LossConfig,
    key: SampleKey,
) -> Result<(LossBreakdown, TensorF)> {
    cfg.validate()?;
    let w = &cfg.weights;
    let shape = tags.tensor().shape().to_vec();
    let mut grad = TensorF::zeros(&shape);
    let mut parts = [0.0; 4];
    let terms: [(f64, &dyn Fn() -> Result<LossValue>); 4] = [
        (w.spectra, &|| spatial_intra_loss(tags, gt, cfg, key)),
        (w.specter, &|| spatial_inter_loss(tags, gt, cfg)),
        (w.tempra, &|| temporal_grouping_loss(tags, gt)),
        (w.temper, &|| temporal_separation_loss(tags, gt, cfg, key)),
    ];
    for (slot, (weight, eval)) in parts.iter_mut().zip(terms.iter()) {
        if *weight == 0.0 {
            continue;
        }
        let lv = eval()?;
        *slot = weight * lv.value;
        grad.add_assign(&lv.grad.scale(*weight))?;
    }
    Ok((
        LossBreakdown::from_components(parts[0], parts[1], parts[2], parts[3], 0.0),
        grad,
    ))
}

/// Mean per-pixel softmax cross-entropy of `T×H×W×K` scores against class ids.
pub fn crossentropy_loss(pred: &TensorF, classes: &[u32]) -> Result<LossValue> {
    let (t, h, w, k) = pred.dims4()?;
    let pixels = t * h * w;
    if classes.len() != pixels {
        return Err(Error::Dimension(format!(
            "{} class labels for {pixels} pixels",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Label(format!("class id {bad} with only {k} score channels")));
    }
    let inv = 1.0 / pixels.max(1) as f64;
    let mut grad = pred.data().to_vec();
    let mut total = 0.0;
    for (row, &c) in grad.chunks_mut(k).zip(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[c as usize];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv;
        }
        row[c as usize] -= inv;
    }
    Ok(LossValue {
        value: total * inv,
        grad: TensorF::new(pred.shape().to_vec(), grad)?,
    })
}

/// Full objective: weighted tagging loss plus weighted cross-entropy.
///
/// `scores` may be absent when the semantic branch is disabled.
pub fn overall_loss(
    tags: &TagVolume,
    scores: Option<&TensorF>,
    gt_tags: &InstanceGT,
    classes: &[u32],
    cfg: &LossConfig,
    key: SampleKey,
) -> Result<(LossBreakdown, TensorF, Option<TensorF>)> {
    let (mut bd, g_tags) = tagging_loss(tags, gt_tags, cfg, key)?;
    let mut g_scores = None;
    if let Some(s) = scores {
        let ce = crossentropy_loss(s, classes)?;
        let wce = cfg.weights.crossentropy;
        bd = LossBreakdown::from_components(bd.l_spectra, bd.l_specter, bd.l_tempra, bd.l_temper, wce * ce.value);
        g_scores = Some(ce.grad.scale(wce));
    }
    Ok((bd, g_tags, g_scores))
}
