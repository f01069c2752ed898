//! Seeded moving-shape clips with exact instance and class masks, plus the
//! training augmentations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{InstanceGT, InstanceInfo, LabelVolume};
use crate::rng::Rng;
use crate::tensor::TensorF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    /// Class id of the shape (0 is background).
    pub fn class_id(self) -> u32 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Rectangle => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub shapes: Vec<ShapeKind>,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Shape radius range as a fraction of the shorter image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Whether shapes may pass over each other (later instances on top).
    /// When false, trajectories are resampled until no two shapes overlap.
    pub allow_occlusion: bool,
    /// Fixed background colour; `None` draws one per clip.
    pub background: Option<[u8; 3]>,
    /// Smallest L1 distance (summed over RGB) between a shape colour and the
    /// background.
    pub min_contrast: u32,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clips: 10,
            frames: 8,
            height: 64,
            width: 64,
            min_instances: 2,
            max_instances: 4,
            shapes: ShapeKind::ALL.to_vec(),
            min_speed: 0.5,
            max_speed: 2.0,
            min_size: 0.1,
            max_size: 0.2,
            allow_occlusion: true,
            background: None,
            min_contrast: 300,
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height < 16 || self.width < 16 {
            return bad("synthetic frames must be at least 16×16");
        }
        if self.frames < 2 {
            return bad("synthetic clips need at least 2 frames");
        }
        if self.min_instances > self.max_instances || self.max_instances > 255 {
            return bad("instance range must satisfy min ≤ max ≤ 255");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape kind is required");
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return bad("speed range must satisfy 0 ≤ min ≤ max");
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 0.5) {
            return bad("size range must satisfy 0 < min ≤ max < 0.5");
        }
        // Every background has colours at least 128 away on each channel.
        if self.min_contrast > 384 {
            return bad("min_contrast above 384 is unreachable for some backgrounds");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Object {
    kind: ShapeKind,
    radius: f64,
    /// Half extents of rectangles.
    half: (f64, f64),
    color: [u8; 3],
    /// Centre per frame, `(x, y)` in pixel units.
    path: Vec<(f64, f64)>,
}

impl Object {
    fn contains(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.path[t];
        let (dx, dy) = (px - cx, py - cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeKind::Rectangle => dx.abs() <= self.half.0 && dy.abs() <= self.half.1,
            ShapeKind::Triangle => {
                // Equilateral, inscribed in the circle of `radius`, apex up.
                let r = self.radius;
                let v = [(0.0, -r), (0.866_025_403_784_438_6 * r, 0.5 * r), (-0.866_025_403_784_438_6 * r, 0.5 * r)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Rectangle => self.half,
            _ => (self.radius, self.radius),
        }
    }
}

/// Positions under constant velocity with reflection at the borders.
fn trajectory(start: (f64, f64), vel: (f64, f64), ext: (f64, f64), w: f64, h: f64, frames: usize) -> Vec<(f64, f64)> {
    let reflect = |p: f64, v: f64, e: f64, size: f64| -> (f64, f64) {
        let (lo, hi) = (e, size - e);
        if hi <= lo {
            return (size / 2.0, 0.0);
        }
        let mut p = p + v;
        let mut v = v;
        // Large steps can cross the box more than once.
        for _ in 0..8 {
            if p < lo {
                p = 2.0 * lo - p;
                v = -v;
            } else if p > hi {
                p = 2.0 * hi - p;
                v = -v;
            } else {
                break;
            }
        }
        (p.clamp(lo, hi), v)
    };
    let mut out = Vec::with_capacity(frames);
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = vel;
    out.push((x, y));
    for _ in 1..frames {
        (x, vx) = reflect(x, vx, ext.0, w);
        (y, vy) = reflect(y, vy, ext.1, h);
        out.push((x, y));
    }
    out
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(&b).map(|(x, y)| (*x as i32 - *y as i32).unsigned_abs()).sum()
}

const PLACEMENT_ATTEMPTS: usize = 1000;

fn sample_objects(spec: &SynthSpec, rng: &mut Rng, background: [u8; 3]) -> Result<Vec<Object>> {
    let n = rng.int_inclusive(spec.min_instances, spec.max_instances);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut objs: Vec<Object> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let kind = spec.shapes[rng.int_inclusive(0, spec.shapes.len() - 1)];
            let radius = side * rng.uniform(spec.min_size, spec.max_size);
            let half = (radius * rng.uniform(0.6, 1.0), radius * rng.uniform(0.6, 1.0));
            let mut color = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let c = [
                    rng.int_inclusive(0, 255) as u8,
                    rng.int_inclusive(0, 255) as u8,
                    rng.int_inclusive(0, 255) as u8,
                ];
                // Far from the background and apart from earlier shapes.
                if color_distance(c, background) >= spec.min_contrast && objs.iter().all(|o| color_distance(c, o.color) >= 60) {
                    color = Some(c);
                    break;
                }
            }
            let color = color.ok_or_else(|| Error::Generation("no distinguishable shape colour left".into()))?;
            let mut obj = Object {
                kind,
                radius,
                half,
                color,
                path: Vec::new(),
            };
            let (ex, ey) = obj.extent();
            let start = (rng.uniform(ex, w - ex), rng.uniform(ey, h - ey));
            let speed = rng.uniform(spec.min_speed, spec.max_speed);
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            obj.path = trajectory(start, (speed * angle.cos(), speed * angle.sin()), (ex, ey), w, h, spec.frames);
            let frames_to_check = if spec.allow_occlusion { 1 } else { spec.frames };
            let clash = objs.iter().any(|o| {
                (0..frames_to_check).any(|t| {
                    // Bounding boxes at least one pixel apart on some axis.
                    let (a, b) = (o.path[t], obj.path[t]);
                    let (ea, eb) = (o.extent(), obj.extent());
                    (a.0 - b.0).abs() < ea.0 + eb.0 + 1.0 && (a.1 - b.1).abs() < ea.1 + eb.1 + 1.0
                })
            });
            if clash {
                ok = false;
                break;
            }
            objs.push(obj);
        }
        if ok {
            return Ok(objs);
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} shapes in a {}×{} frame after {PLACEMENT_ATTEMPTS} attempts",
        spec.width, spec.height
    )))
}

/// A rendered clip: frames as bytes and as `[0, 1]` values, with ground truth.
#[derive(Clone, Debug)]
pub struct SynthClip {
    /// `T×H×W×3` in `[0, 1]` (exactly `byte / 255`).
    pub clip: TensorF,
    pub gt: InstanceGT,
}

/// Renders clip `index` of the dataset described by `spec`.
pub fn generate_clip(spec: &SynthSpec, index: u64) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.rng_seed, &[index]);
    let drawn = [
        rng.int_inclusive(0, 255) as u8,
        rng.int_inclusive(0, 255) as u8,
        rng.int_inclusive(0, 255) as u8,
    ];
    let background = spec.background.unwrap_or(drawn);
    let objs = sample_objects(spec, &mut rng, background)?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let mut pixels = Vec::with_capacity(t_n * h * w * 3);
    let mut labels = Vec::with_capacity(t_n * h * w);
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Later instances are drawn on top.
                let top = objs.iter().enumerate().rev().find(|(_, o)| o.contains(t, px, py));
                let (label, color) = match top {
                    Some((i, o)) => (i as u32 + 1, o.color),
                    None => (0, background),
                };
                labels.push(label);
                pixels.extend(color.iter().map(|&c| c as f64 / 255.0));
            }
        }
    }
    let instances = objs
        .iter()
        .enumerate()
        .map(|(i, o)| InstanceInfo {
            id: i as u32 + 1,
            class_id: o.kind.class_id(),
        })
        .collect();
    Ok(SynthClip {
        clip: TensorF::new(vec![t_n, h, w, 3], pixels)?,
        gt: InstanceGT::new(LabelVolume::new(t_n, h, w, labels)?, instances)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    /// Smallest crop side as a fraction of the frame; 1 disables cropping.
    pub crop_min_fraction: f64,
    pub hflip_prob: f64,
    pub tflip_prob: f64,
    /// Probability of dropping one run of consecutive frames.
    pub drop_prob: f64,
    pub drop_min: usize,
    pub drop_max: usize,
    pub rng_seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            crop_min_fraction: 0.8,
            hflip_prob: 0.5,
            tflip_prob: 0.5,
            drop_prob: 0.5,
            drop_min: 1,
            drop_max: 5,
            rng_seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentationSpec {
            crop_min_fraction: 1.0,
            hflip_prob: 0.0,
            tflip_prob: 0.0,
            drop_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0)
            || !prob(self.hflip_prob)
            || !prob(self.tflip_prob)
            || !prob(self.drop_prob)
            || self.drop_min == 0
            || self.drop_min > self.drop_max
        {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// The random choices of one augmentation call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    /// `(y0, x0, height, width)` of the crop window.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub hflip: bool,
    pub tflip: bool,
    /// `(start, length)` of the dropped run, in post-flip frame order.
    pub drop: Option<(usize, usize)>,
}

pub fn sample_plan(aug: &AugmentationSpec, frames: usize, height: usize, width: usize, step: u64) -> AugmentPlan {
    let mut rng = Rng::derive(aug.rng_seed, &[step]);
    let crop = if aug.crop_min_fraction < 1.0 {
        let f = rng.uniform(aug.crop_min_fraction, 1.0);
        let ch = ((height as f64 * f).round() as usize).clamp(1, height);
        let cw = ((width as f64 * f).round() as usize).clamp(1, width);
        Some((rng.int_inclusive(0, height - ch), rng.int_inclusive(0, width - cw), ch, cw))
    } else {
        None
    };
    let hflip = rng.bernoulli(aug.hflip_prob);
    let tflip = rng.bernoulli(aug.tflip_prob);
    let max_len = aug.drop_max.min(frames.saturating_sub(1));
    let drop = if rng.bernoulli(aug.drop_prob) && max_len >= aug.drop_min {
        let len = rng.int_inclusive(aug.drop_min, max_len);
        Some((rng.int_inclusive(0, frames - len), len))
    } else {
        None
    };
    AugmentPlan {
        crop,
        hflip,
        tflip,
        drop,
    }
}

/// Source index along each axis for every output index.
fn plan_maps(plan: &AugmentPlan, frames: usize, height: usize, width: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..frames).collect();
    if plan.tflip {
        order.reverse();
    }
    if let Some((start, len)) = plan.drop {
        order.drain(start..start + len);
    }
    let frame_map = (0..frames).map(|k| order[k % order.len()]).collect();
    let (y0, x0, ch, cw) = plan.crop.unwrap_or((0, 0, height, width));
    let ymap = (0..height).map(|y| y0 + (y * ch + ch / 2) / height).map(|v| v.min(y0 + ch - 1)).collect();
    let xmap = (0..width)
        .map(|x| if plan.hflip { width - 1 - x } else { x })
        .map(|x| (x0 + (x * cw + cw / 2) / width).min(x0 + cw - 1))
        .collect();
    (frame_map, ymap, xmap)
}

fn gather<T: Copy>(src: &[T], dims: (usize, usize, usize, usize), maps: &(Vec<usize>, Vec<usize>, Vec<usize>)) -> Vec<T> {
    let (_, h, w, c) = dims;
    let mut out = Vec::with_capacity(src.len());
    for &ft in &maps.0 {
        for &sy in &maps.1 {
            for &sx in &maps.2 {
                let base = ((ft * h + sy) * w + sx) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    out
}

/// Applies the same geometric transform to a clip and its ground truth.
/// Instances that disappear entirely are pruned from the ground truth.
pub fn augment(clip: &TensorF, gt: &InstanceGT, aug: &AugmentationSpec, step: u64) -> Result<(TensorF, InstanceGT)> {
    aug.validate()?;
    let (t, h, w, _) = clip.dims4()?;
    let v = &gt.volume;
    if (v.frames, v.height, v.width) != (t, h, w) {
        return Err(Error::Dimension(format!(
            "clip {t}×{h}×{w} vs ground truth {}×{}×{}",
            v.frames, v.height, v.width
        )));
    }
    let plan = sample_plan(aug, t, h, w, step);
    apply_plan(clip, gt, &plan)
}

pub fn apply_plan(clip: &TensorF, gt: &InstanceGT, plan: &AugmentPlan) -> Result<(TensorF, InstanceGT)> {
    let (t, h, w, c) = clip.dims4()?;
    let maps = plan_maps(plan, t, h, w);
    let pixels = gather(clip.data(), (t, h, w, c), &maps);
    let labels = gather(&gt.volume.labels, (t, h, w, 1), &maps);
    let present: std::collections::BTreeSet<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
    let instances = gt.instances.iter().copied().filter(|i| present.contains(&i.id)).collect();
    Ok((
        TensorF::new(clip.shape().to_vec(), pixels)?,
        InstanceGT::new(LabelVolume::new(t, h, w, labels)?, instances)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            rng_seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn static_circle_is_constant() {
        let s = SynthSpec {
            min_instances: 1,
            max_instances: 1,
            shapes: vec![ShapeKind::Circle],
            min_speed: 0.0,
            max_speed: 0.0,
            ..spec()
        };
        let c = generate_clip(&s, 0).unwrap();
        let n = 64 * 64;
        let labels = &c.gt.volume.labels;
        for t in 1..s.frames {
            assert_eq!(&labels[t * n..(t + 1) * n], &labels[..n]);
        }
        assert_eq!(c.gt.instances, vec![InstanceInfo { id: 1, class_id: 1 }]);
    }

    #[test]
    fn determinism_and_index_sensitivity() {
        let s = spec();
        let a = generate_clip(&s, 4).unwrap();
        let b = generate_clip(&s, 4).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.gt, b.gt);
        let c = generate_clip(&s, 5).unwrap();
        assert_ne!(a.clip, c.clip);
    }

    #[test]
    fn non_occluding_shapes_stay_disjoint_and_visible() {
        let s = SynthSpec {
            min_instances: 2,
            max_instances: 2,
            allow_occlusion: false,
            max_size: 0.12,
            ..spec()
        };
        for i in 0..5 {
            let c = generate_clip(&s, i).unwrap();
            assert_eq!(c.gt.len(), 2);
            let sets = c.gt.pixel_sets();
            for set in &sets {
                assert!(set.per_frame.iter().all(|f| !f.is_empty()));
            }
        }
    }

    #[test]
    fn shapes_move_and_classes_match() {
        let s = SynthSpec {
            min_speed: 1.5,
            max_speed: 2.0,
            ..spec()
        };
        let c = generate_clip(&s, 1).unwrap();
        let n = 64 * 64;
        assert_ne!(&c.gt.volume.labels[..n], &c.gt.volume.labels[n..2 * n]);
        assert!((2..=4).contains(&c.gt.len()));
        assert!(c.gt.instances.iter().all(|i| (1..=3).contains(&i.class_id)));
        assert!(c.clip.data().iter().all(|v| (v * 255.0).round() == v * 255.0));
    }

    #[test]
    fn crowded_spec_fails_to_generate() {
        let s = SynthSpec {
            min_instances: 40,
            max_instances: 40,
            min_size: 0.3,
            max_size: 0.4,
            ..spec()
        };
        assert!(matches!(generate_clip(&s, 0), Err(Error::Generation(_))));
        let s = SynthSpec { height: 8, ..spec() };
        assert!(matches!(generate_clip(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_augmentation() {
        let c = generate_clip(&spec(), 0).unwrap();
        let (x, g) = augment(&c.clip, &c.gt, &AugmentationSpec::identity(), 9).unwrap();
        assert_eq!(x, c.clip);
        assert_eq!(g, c.gt);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let c = generate_clip(&spec(), 2).unwrap();
        let plan = AugmentPlan {
            crop: None,
            hflip: true,
            tflip: false,
            drop: None,
        };
        let (x1, g1) = apply_plan(&c.clip, &c.gt, &plan).unwrap();
        assert_ne!(x1, c.clip);
        let (x2, g2) = apply_plan(&x1, &g1, &plan).unwrap();
        assert_eq!(x2, c.clip);
        assert_eq!(g2, c.gt);
        let tplan = AugmentPlan { hflip: false, tflip: true, ..plan };
        let (y1, h1) = apply_plan(&c.clip, &c.gt, &tplan).unwrap();
        let (y2, h2) = apply_plan(&y1, &h1, &tplan).unwrap();
        assert_eq!((y2, h2), (c.clip.clone(), c.gt.clone()));
    }

    #[test]
    fn drop_runs_stay_in_range() {
        let aug = AugmentationSpec {
            drop_prob: 1.0,
            ..AugmentationSpec::default()
        };
        let mut seen = [false; 6];
        for step in 0..10_000 {
            let p = sample_plan(&aug, 8, 64, 64, step);
            let (start, len) = p.drop.unwrap();
            assert!((1..=5).contains(&len));
            assert!(start + len <= 8);
            seen[len] = true;
        }
        assert!(seen[1..=5].iter().all(|&s| s));
    }

    #[test]
    fn frame_drop_loops_remaining_frames() {
        let c = generate_clip(&spec(), 0).unwrap();
        let plan = AugmentPlan {
            crop: None,
            hflip: false,
            tflip: false,
            drop: Some((2, 3)),
        };
        let (x, _) = apply_plan(&c.clip, &c.gt, &plan).unwrap();
        // Remaining frames 0,1,5,6,7 then loop: 0,1,5.
        for (k, src) in [0, 1, 5, 6, 7, 0, 1, 5].into_iter().enumerate() {
            assert_eq!(x.frame(k), c.clip.frame(src));
        }
    }

    #[test]
    fn augmented_ground_truth_stays_consistent() {
        let aug = AugmentationSpec {
            crop_min_fraction: 0.5,
            ..AugmentationSpec::default()
        };
        for i in 0..10u64 {
            let c = generate_clip(&spec(), i).unwrap();
            let (x, g) = augment(&c.clip, &c.gt, &aug, i).unwrap();
            assert_eq!(x.shape(), c.clip.shape());
            assert!(g.len() <= c.gt.len());
            // Every labelled pixel keeps its instance's colour from the source.
            let mut colour = std::collections::HashMap::new();
            for (idx, &l) in c.gt.volume.labels.iter().enumerate() {
                colour.entry(l).or_insert_with(|| c.clip.data()[idx * 3..idx * 3 + 3].to_vec());
            }
            for (idx, &l) in g.volume.labels.iter().enumerate() {
                assert_eq!(&x.data()[idx * 3..idx * 3 + 3], &colour[&l][..]);
            }
        }
    }
}
