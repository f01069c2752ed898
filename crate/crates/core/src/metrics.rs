//! Region similarity J, boundary measure F and video-level AP/AR.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{squared_distance, InstanceResult};
use crate::error::{Error, Result};
use crate::loss::InstanceGT;

/// Boundary tolerance as a fraction of the image diagonal.
pub const DEFAULT_DIAG_TOLERANCE: f64 = 0.008;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// `Σ|A∩B| / Σ|A∪B|` over all frames; two empty masks count as identical.
pub fn video_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mask pixels with a 4-neighbour outside the mask or the image.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            out[i] = x == 0 || y == 0 || x + 1 == w || y + 1 == h || !mask[i - 1] || !mask[i + 1] || !mask[i - w] || !mask[i + w];
        }
    }
    out
}

/// Matching radius in pixels for an `h×w` image.
pub fn boundary_radius(h: usize, w: usize, diag_tolerance: f64) -> f64 {
    (diag_tolerance * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Boundary F-measure of one frame. Two empty masks score 1.
pub fn frame_f_measure(pred: &[bool], gt: &[bool], h: usize, w: usize, radius: f64) -> f64 {
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let r2 = radius * radius;
    let to_gt = squared_distance(&bg, h, w, true);
    let to_pred = squared_distance(&bp, h, w, true);
    let hit_p = bp.iter().zip(&to_gt).filter(|(&b, &d)| b && d <= r2).count();
    let hit_g = bg.iter().zip(&to_pred).filter(|(&b, &d)| b && d <= r2).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean per-frame boundary F over a clip of `frames` frames.
pub fn video_f_measure(pred: &[bool], gt: &[bool], frames: usize, h: usize, w: usize, radius: f64) -> Result<f64> {
    let n = h * w;
    if pred.len() != frames * n || gt.len() != frames * n {
        return Err(Error::Contract("mask sizes do not match the clip".into()));
    }
    if frames == 0 {
        return Ok(1.0);
    }
    let total: f64 = (0..frames)
        .map(|t| frame_f_measure(&pred[t * n..(t + 1) * n], &gt[t * n..(t + 1) * n], h, w, radius))
        .sum();
    Ok(total / frames as f64)
}

/// Maximum-weight one-to-one assignment of rows to columns.
///
/// Returns for each row the matched column, if any. Weights must be finite.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    // Square cost matrix, 1-based potentials (classic O(n³) formulation).
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// One-to-one assignment between predicted and ground-truth instances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index, video IoU)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

/// Per-object scores of one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceJF {
    /// One entry per ground-truth instance (0 when unmatched).
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub matching: MatchResult,
}

impl SequenceJF {
    pub fn j_mean(&self) -> f64 {
        mean(&self.j)
    }

    pub fn f_mean(&self) -> f64 {
        mean(&self.f)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_extent(pred: &InstanceResult, gt: &InstanceGT) -> Result<()> {
    let (a, b) = (&pred.labels, &gt.volume);
    if (a.frames, a.height, a.width) != (b.frames, b.height, b.width) {
        return Err(Error::Contract(format!(
            "prediction {}×{}×{} vs ground truth {}×{}×{}",
            a.frames, a.height, a.width, b.frames, b.height, b.width
        )));
    }
    Ok(())
}

/// J and F pair matrices, `[prediction][ground truth]`.
pub fn pair_scores(pred: &InstanceResult, gt: &InstanceGT, diag_tolerance: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_extent(pred, gt)?;
    let v = &gt.volume;
    let radius = boundary_radius(v.height, v.width, diag_tolerance);
    let pm: Vec<Vec<bool>> = pred.instances.iter().map(|i| pred.mask(i.id)).collect();
    let gm: Vec<Vec<bool>> = gt.instances.iter().map(|i| v.mask_of(i.id)).collect();
    let mut j = vec![vec![0.0; gm.len()]; pm.len()];
    let mut f = j.clone();
    for (a, p) in pm.iter().enumerate() {
        for (b, g) in gm.iter().enumerate() {
            j[a][b] = video_iou(p, g)?;
            f[a][b] = video_f_measure(p, g, v.frames, v.height, v.width, radius)?;
        }
    }
    Ok((j, f))
}

/// Matches instances to maximize mean J&F, then scores every ground-truth
/// instance (unmatched ones score 0).
pub fn j_f_scores(pred: &InstanceResult, gt: &InstanceGT, diag_tolerance: f64) -> Result<SequenceJF> {
    let (j, f) = pair_scores(pred, gt, diag_tolerance)?;
    let jf: Vec<Vec<f64>> = j
        .iter()
        .zip(&f)
        .map(|(jr, fr)| jr.iter().zip(fr).map(|(a, b)| (a + b) / 2.0).collect())
        .collect();
    let assign = max_weight_assignment(&jf);
    let mut out = SequenceJF {
        j: vec![0.0; gt.len()],
        f: vec![0.0; gt.len()],
        matching: MatchResult::default(),
    };
    let mut gt_used = vec![false; gt.len()];
    for (p, a) in assign.iter().enumerate() {
        match a {
            Some(g) => {
                out.j[*g] = j[p][*g];
                out.f[*g] = f[p][*g];
                gt_used[*g] = true;
                out.matching.pairs.push((p, *g, j[p][*g]));
            }
            None => out.matching.unmatched_predictions.push(p),
        }
    }
    out.matching.unmatched_ground_truth = (0..gt.len()).filter(|&g| !gt_used[g]).collect();
    Ok(out)
}

/// Per-class AP/AR summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

/// Maximum detections per video and class.
const MAX_DETECTIONS: usize = 100;

/// Greedy matching of one video's detections (sorted by confidence) against
/// its ground truth. Returns the TP flag of every detection.
fn greedy_match(ious: &[Vec<f64>], order: &[usize], threshold: f64) -> Vec<bool> {
    let n_gt = ious.first().map_or(0, Vec::len);
    let mut taken = vec![false; n_gt];
    order
        .iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..n_gt {
                let iou = ious[d][g];
                if !taken[g] && iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Area under the precision envelope, summed over recall steps.
pub fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &f) in tp_flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Class-wise detections and ground truth of one video.
struct VideoClass {
    /// Detection confidences, already sorted descending and capped.
    confidences: Vec<f64>,
    ious: Vec<Vec<f64>>,
    n_gt: usize,
}

/// YouTube-VIS style AP and AR over the given IoU thresholds.
///
/// Classes without ground truth in any video are skipped.
pub fn average_precision(videos: &[(InstanceResult, InstanceGT)], num_classes: u32, thresholds: &[f64]) -> Result<ApSummary> {
    for (pred, gt) in videos {
        check_extent(pred, gt)?;
        for c in pred.instances.iter().map(|i| i.class_id).chain(gt.instances.iter().map(|i| i.class_id)) {
            if c == 0 || c > num_classes {
                return Err(Error::Label(format!("class id {c} outside 1..={num_classes}")));
            }
        }
    }
    let per_video: Vec<Vec<VideoClass>> = videos
        .par_iter()
        .map(|(pred, gt)| {
            (1..=num_classes)
                .map(|c| {
                    let mut dets: Vec<(f64, Vec<bool>)> = pred
                        .instances
                        .iter()
                        .filter(|i| i.class_id == c)
                        .map(|i| (i.confidence, pred.mask(i.id)))
                        .collect();
                    // Stable: equal confidences keep instance order.
                    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
                    dets.truncate(MAX_DETECTIONS);
                    let gms: Vec<Vec<bool>> = gt
                        .instances
                        .iter()
                        .filter(|i| i.class_id == c)
                        .map(|i| gt.volume.mask_of(i.id))
                        .collect();
                    let ious = dets
                        .iter()
                        .map(|(_, m)| gms.iter().map(|g| video_iou(m, g).expect("checked extent")).collect())
                        .collect();
                    VideoClass {
                        confidences: dets.iter().map(|d| d.0).collect(),
                        ious,
                        n_gt: gms.len(),
                    }
                })
                .collect()
        })
        .collect();

    let mut ap_sum = vec![0.0; thresholds.len()];
    let mut ar1 = 0.0;
    let mut ar10 = 0.0;
    let mut classes = 0usize;
    for c in 0..num_classes as usize {
        let n_gt: usize = per_video.iter().map(|v| v[c].n_gt).sum();
        if n_gt == 0 {
            continue;
        }
        classes += 1;
        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
            let (mut hits1, mut hits10) = (0usize, 0usize);
            for (vi, v) in per_video.iter().enumerate() {
                let vc = &v[c];
                let order: Vec<usize> = (0..vc.confidences.len()).collect();
                let flags = greedy_match(&vc.ious, &order, thr);
                for (k, &f) in flags.iter().enumerate() {
                    scored.push((vc.confidences[k], vi, k, f));
                }
                hits1 += greedy_match(&vc.ious, &order[..order.len().min(1)], thr).iter().filter(|&&f| f).count();
                hits10 += greedy_match(&vc.ious, &order[..order.len().min(10)], thr).iter().filter(|&&f| f).count();
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = scored.iter().map(|s| s.3).collect();
            ap_sum[ti] += interpolated_ap(&flags, n_gt);
            ar1 += hits1 as f64 / n_gt as f64;
            ar10 += hits10 as f64 / n_gt as f64;
        }
    }
    if classes == 0 || thresholds.is_empty() {
        return Ok(ApSummary::default());
    }
    let at = |t: f64| {
        thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map_or(0.0, |i| ap_sum[i] / classes as f64)
    };
    let denom = (classes * thresholds.len()) as f64;
    Ok(ApSummary {
        map: ap_sum.iter().sum::<f64>() / denom,
        ap50: at(0.5),
        ap75: at(0.75),
        ar1: ar1 / denom,
        ar10: ar10 / denom,
    })
}

/// Which metric families to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSet {
    pub j: bool,
    pub f: bool,
    pub ap: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet { j: true, f: true, ap: true };

    /// Parses a comma-separated list such as `j,f,ap`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = MetricSet { j: false, f: false, ap: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "j" => m.j = true,
                "f" => m.f = true,
                "ap" => m.ap = true,
                other => return Err(Error::Config(format!("unknown metric {other:?}"))),
            }
        }
        Ok(m)
    }
}

/// Scores in `[0, 1]`; [`MetricReport::percent`] gives the ×100 form used
/// in reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_and_f: f64,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

impl MetricReport {
    pub fn percent(&self) -> MetricReport {
        MetricReport {
            j_mean: 100.0 * self.j_mean,
            f_mean: 100.0 * self.f_mean,
            j_and_f: 100.0 * self.j_and_f,
            map: 100.0 * self.map,
            ap50: 100.0 * self.ap50,
            ap75: 100.0 * self.ap75,
            ar1: 100.0 * self.ar1,
            ar10: 100.0 * self.ar10,
        }
    }

    /// Two-row table of percentages with aligned columns.
    pub fn table(&self) -> String {
        let p = self.percent();
        let cols = [
            ("J&F", p.j_and_f),
            ("J-Mean", p.j_mean),
            ("F-Mean", p.f_mean),
            ("mAP", p.map),
            ("AP@50", p.ap50),
            ("AP@75", p.ap75),
            ("AR@1", p.ar1),
            ("AR@10", p.ar10),
        ];
        let head: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>8}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{v:>8.1}")).collect();
        format!("{}\n{}\n", head.join(" "), vals.join(" "))
    }
}

/// Evaluates a set of sequences. J and F are averaged over all ground-truth
/// objects of all sequences.
pub fn evaluate(
    videos: &[(InstanceResult, InstanceGT)],
    num_classes: u32,
    diag_tolerance: f64,
    which: MetricSet,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    if which.j || which.f {
        let per: Vec<SequenceJF> = videos
            .par_iter()
            .map(|(p, g)| j_f_scores(p, g, diag_tolerance))
            .collect::<Result<_>>()?;
        let js: Vec<f64> = per.iter().flat_map(|s| s.j.iter().copied()).collect();
        let fs: Vec<f64> = per.iter().flat_map(|s| s.f.iter().copied()).collect();
        if which.j {
            report.j_mean = mean(&js);
        }
        if which.f {
            report.f_mean = mean(&fs);
        }
        if which.j && which.f {
            report.j_and_f = (report.j_mean + report.f_mean) / 2.0;
        }
    }
    if which.ap {
        let ap = average_precision(videos, num_classes, &coco_thresholds())?;
        report.map = ap.map;
        report.ap50 = ap.ap50;
        report.ap75 = ap.ap75;
        report.ar1 = ap.ar1;
        report.ar10 = ap.ar10;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::DecodedInstance;
    use crate::loss::{InstanceInfo, LabelVolume};

    fn rect(frames: usize, h: usize, w: usize, x0: usize, y0: usize, rw: usize, rh: usize, id: u32) -> Vec<u32> {
        let mut v = vec![0; frames * h * w];
        for t in 0..frames {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    v[(t * h + y) * w + x] = id;
                }
            }
        }
        v
    }

    fn pred(labels: Vec<u32>, frames: usize, h: usize, w: usize, inst: &[(u32, u32, f64)]) -> InstanceResult {
        InstanceResult {
            labels: LabelVolume::new(frames, h, w, labels).unwrap(),
            instances: inst
                .iter()
                .map(|&(id, class_id, confidence)| DecodedInstance { id, class_id, confidence })
                .collect(),
        }
    }

    fn gt(labels: Vec<u32>, frames: usize, h: usize, w: usize, inst: &[(u32, u32)]) -> InstanceGT {
        InstanceGT::new(
            LabelVolume::new(frames, h, w, labels).unwrap(),
            inst.iter().map(|&(id, class_id)| InstanceInfo { id, class_id }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = vec![true, true, false, false];
        assert_eq!(video_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(video_iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        // 2×4 rectangles overlapping on 2×2.
        let a: Vec<bool> = rect(3, 4, 8, 0, 0, 4, 2, 1).iter().map(|&l| l == 1).collect();
        let b: Vec<bool> = rect(3, 4, 8, 2, 0, 4, 2, 1).iter().map(|&l| l == 1).collect();
        assert!((video_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(video_iou(&a, &b).unwrap(), video_iou(&b, &a).unwrap());
        assert!(matches!(video_iou(&a, &b[1..]), Err(Error::Contract(_))));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let labels = rect(2, 10, 10, 2, 2, 4, 5, 1);
        let g = gt(labels.clone(), 2, 10, 10, &[(1, 1)]);
        let p = pred(labels, 2, 10, 10, &[(1, 1, 0.9)]);
        let s = j_f_scores(&p, &g, DEFAULT_DIAG_TOLERANCE).unwrap();
        assert_eq!((s.j_mean(), s.f_mean()), (1.0, 1.0));
        let r = evaluate(&[(p, g.clone())], 3, DEFAULT_DIAG_TOLERANCE, MetricSet::ALL).unwrap();
        assert_eq!(r.percent().j_and_f, 100.0);
        assert_eq!(r.map, 1.0);

        let empty = InstanceResult::empty(2, 10, 10);
        let s = j_f_scores(&empty, &g, DEFAULT_DIAG_TOLERANCE).unwrap();
        assert_eq!((s.j_mean(), s.f_mean()), (0.0, 0.0));
        let r = evaluate(&[(empty, g)], 3, DEFAULT_DIAG_TOLERANCE, MetricSet::ALL).unwrap();
        assert_eq!(r, MetricReport::default());
    }

    #[test]
    fn third_iou_case() {
        let g = gt(rect(2, 4, 8, 0, 0, 4, 2, 1), 2, 4, 8, &[(1, 1)]);
        let p = pred(rect(2, 4, 8, 2, 0, 4, 2, 1), 2, 4, 8, &[(1, 1, 1.0)]);
        let r = evaluate(&[(p, g)], 1, DEFAULT_DIAG_TOLERANCE, MetricSet::ALL).unwrap();
        assert!((r.percent().j_mean - 33.3).abs() < 0.1);
    }

    #[test]
    fn ap_examples() {
        // IoU 0.6 between a 10-pixel truth and a prediction covering 6 of it.
        let g = gt(rect(1, 1, 10, 0, 0, 10, 1, 1), 1, 1, 10, &[(1, 2)]);
        let p = pred(rect(1, 1, 10, 0, 0, 6, 1, 1), 1, 1, 10, &[(1, 2, 0.8)]);
        let ap = average_precision(&[(p.clone(), g.clone())], 3, &coco_thresholds()).unwrap();
        assert!((ap.map - 0.3).abs() < 1e-12);
        assert_eq!(ap.ap50, 1.0);
        assert_eq!(ap.ap75, 0.0);

        let exact = pred(rect(1, 1, 10, 0, 0, 10, 1, 1), 1, 1, 10, &[(1, 2, 0.8)]);
        let ap = average_precision(&[(exact, g.clone())], 3, &coco_thresholds()).unwrap();
        assert_eq!((ap.map, ap.ar1, ap.ar10), (1.0, 1.0, 1.0));

        let wrong = pred(rect(1, 1, 10, 0, 0, 10, 1, 1), 1, 1, 10, &[(1, 3, 0.8)]);
        let ap = average_precision(&[(wrong, g.clone())], 3, &coco_thresholds()).unwrap();
        assert_eq!(ap.map, 0.0);

        let unknown = pred(rect(1, 1, 10, 0, 0, 10, 1, 1), 1, 1, 10, &[(1, 9, 0.8)]);
        assert!(matches!(
            average_precision(&[(unknown, g)], 3, &coco_thresholds()),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn interpolated_ap_envelope() {
        // TP, FP, TP with 2 ground truths: recall 0.5 at p=1, 1.0 at p=2/3.
        let ap = interpolated_ap(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = crate::rng::Rng::new(4);
        for _ in 0..200 {
            let r = rng.int_inclusive(0, 4);
            let c = rng.int_inclusive(0, 4);
            let w: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
            let a = max_weight_assignment(&w);
            let total: f64 = a.iter().enumerate().filter_map(|(i, j)| j.map(|j| w[i][j])).sum();
            let mut used = vec![false; c];
            for j in a.iter().flatten() {
                assert!(!used[*j]);
                used[*j] = true;
            }
            fn best(w: &[Vec<f64>], i: usize, used: &mut Vec<bool>) -> f64 {
                if i == w.len() {
                    return 0.0;
                }
                let mut b = best(w, i + 1, used);
                for j in 0..used.len() {
                    if !used[j] {
                        used[j] = true;
                        b = b.max(w[i][j] + best(w, i + 1, used));
                        used[j] = false;
                    }
                }
                b
            }
            let opt = best(&w, 0, &mut vec![false; c]);
            assert!((total - opt).abs() < 1e-12, "{total} vs {opt}");
        }
    }

    #[test]
    fn shrinking_a_false_positive_never_lowers_j() {
        let g = gt(rect(1, 12, 12, 0, 0, 4, 4, 1), 1, 12, 12, &[(1, 1)]);
        let mut labels = rect(1, 12, 12, 0, 0, 4, 4, 1);
        for (i, l) in rect(1, 12, 12, 6, 6, 5, 5, 2).into_iter().enumerate() {
            if l != 0 {
                labels[i] = l;
            }
        }
        let mut prev = None;
        for side in (0..=5).rev() {
            let mut lab = labels.clone();
            for (i, l) in lab.iter_mut().enumerate() {
                let (y, x) = (i / 12, i % 12);
                if *l == 2 && (y >= 6 + side || x >= 6 + side) {
                    *l = 0;
                }
            }
            let inst: Vec<(u32, u32, f64)> = if side > 0 { vec![(1, 1, 0.9), (2, 1, 0.5)] } else { vec![(1, 1, 0.9)] };
            let p = pred(lab, 1, 12, 12, &inst);
            let j = j_f_scores(&p, &g, DEFAULT_DIAG_TOLERANCE).unwrap().j_mean();
            if let Some(pj) = prev {
                assert!(j >= pj);
            }
            prev = Some(j);
        }
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(MetricSet::parse("j,f,ap").unwrap(), MetricSet::ALL);
        assert_eq!(MetricSet::parse("ap").unwrap(), MetricSet { j: false, f: false, ap: true });
        assert!(MetricSet::parse("j,x").is_err());
    }

    #[test]
    fn table_is_aligned() {
        let t = MetricReport { j_mean: 0.5, ..MetricReport::default() }.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(lines[1].contains("50.0"));
    }
}
