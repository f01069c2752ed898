//! Central finite differences for checking analytic gradients.

use serde::Serialize;

use crate::attention::{self, AttentionWeights, TagAttentionWeights, TemporalPooling};
use crate::error::{Error, Result};
use crate::loss::{self, InstanceGT, InstanceInfo, LabelVolume, LossConfig, LossValue, SampleKey, TagVolume};
use crate::rng::Rng;
use crate::tensor::TensorF;

/// Step used when none is given; suited to values of order one.
pub const DEFAULT_EPS: f64 = 1e-4;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &TensorF, eps: f64) -> Result<TensorF>
where
    F: FnMut(&TensorF) -> Result<f64>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Numeric(format!("finite-difference step {eps} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = TensorF::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around element {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
///
/// Returns 0 when both vectors are below `1e-12` everywhere.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

/// Outcome of one component of the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Numeric gradients at `eps` and `2·eps` disagree beyond the
    /// tolerance, so the comparison says nothing.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub points: usize,
    /// Largest norm-wise relative error over all points.
    pub worst: f64,
    pub status: CheckStatus,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteSettings {
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Tag margin used by the hinge terms.
    pub margin: f64,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        SuiteSettings {
            points: 100,
            eps: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            margin: 0.3,
        }
    }
}

const TAG_SHAPE: [usize; 4] = [2, 8, 8, 1];
const FEATURE_SHAPE: [usize; 4] = [2, 4, 4, 4];
const INSTANCES: u32 = 3;

/// Per-point error of analytic against numeric gradients over a list of
/// inputs, and the disagreement between numeric gradients at `eps` and
/// `2·eps`. A large disagreement means round-off swamps the difference.
fn compare<F>(inputs: &[TensorF], analytic: &[TensorF], f: F, eps: f64) -> Result<(f64, f64)>
where
    F: Fn(&[TensorF]) -> Result<f64>,
{
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut n2 = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let mut rest = inputs.to_vec();
        let mut numeric = |step: f64| {
            finite_diff_grad(
                |probe| {
                    rest[k] = probe.clone();
                    f(&rest)
                },
                x,
                step,
            )
        };
        n.extend_from_slice(numeric(eps)?.data());
        n2.extend_from_slice(numeric(2.0 * eps)?.data());
        a.extend_from_slice(analytic[k].data());
    }
    Ok((relative_error(&a, &n), relative_error(&n, &n2)))
}

/// Random label volume where every instance shows up in every frame.
fn random_gt(rng: &mut Rng) -> InstanceGT {
    let [t, h, w, _] = TAG_SHAPE;
    loop {
        let labels: Vec<u32> = (0..t * h * w).map(|_| rng.int_inclusive(0, INSTANCES as usize) as u32).collect();
        let ok = (0..t).all(|f| (1..=INSTANCES).all(|id| labels[f * h * w..(f + 1) * h * w].contains(&id)));
        if ok {
            let vol = LabelVolume::new(t, h, w, labels).expect("sizes agree");
            let infos = (1..=INSTANCES).map(|id| InstanceInfo { id, class_id: 1 }).collect();
            return InstanceGT::new(vol, infos).expect("all instances present");
        }
    }
}

/// Tags clustered around one random level per instance.
fn random_tags(gt: &InstanceGT, rng: &mut Rng) -> TagVolume {
    let levels: Vec<f64> = (0..=INSTANCES).map(|_| rng.uniform(0.1, 0.9)).collect();
    let data = gt
        .volume
        .labels
        .iter()
        .map(|&l| levels[l as usize] + rng.uniform(-0.05, 0.05))
        .collect();
    TagVolume::new(TensorF::new(TAG_SHAPE.to_vec(), data).expect("shape")).expect("in range")
}

/// Distance of every hinge argument from its kinks.
fn kink_distance(tags: &TagVolume, gt: &InstanceGT, margin: f64) -> f64 {
    let sets = gt.pixel_sets();
    let x = tags.values();
    let mean = |idx: &[usize]| idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
    let mut gap = f64::INFINITY;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            let mut diffs = vec![mean(&sets[a].all) - mean(&sets[b].all)];
            for f in 0..gt.frames() {
                diffs.push(mean(&sets[a].per_frame[f]) - mean(&sets[b].per_frame[f]));
            }
            for d in diffs {
                gap = gap.min(d.abs()).min((d.abs() - margin).abs());
            }
        }
    }
    gap
}

type PointFn<'a> = dyn FnMut(&mut Rng) -> Result<(f64, f64)> + 'a;

fn tag_component(which: usize, settings: &SuiteSettings) -> impl FnMut(&mut Rng) -> Result<(f64, f64)> {
    let s = *settings;
    move |rng: &mut Rng| {
        let cfg = LossConfig {
            margin: s.margin,
            samples_per_instance: 16,
            rng_seed: rng.next_u64(),
            ..LossConfig::default()
        };
        let key = SampleKey { clip: 0, step: 0 };
        let gt = random_gt(rng);
        let mut tags = random_tags(&gt, rng);
        while kink_distance(&tags, &gt, s.margin) < 100.0 * s.eps {
            tags = random_tags(&gt, rng);
        }
        let eval = |t: &TagVolume| -> Result<LossValue> {
            match which {
                0 => loss::spatial_intra_loss(t, &gt, &cfg, key),
                1 => loss::spatial_inter_loss(t, &gt, &cfg),
                2 => loss::temporal_grouping_loss(t, &gt),
                _ => loss::temporal_separation_loss(t, &gt, &cfg, key),
            }
        };
        let analytic = eval(&tags)?.grad;
        compare(
            &[tags.tensor().clone()],
            &[analytic],
            |x| Ok(eval(&TagVolume::new(x[0].clone())?)?.value),
            s.eps,
        )
    }
}

fn crossentropy_component(settings: &SuiteSettings) -> impl FnMut(&mut Rng) -> Result<(f64, f64)> {
    let eps = settings.eps;
    move |rng: &mut Rng| {
        let [t, h, w, _] = TAG_SHAPE;
        let logits = TensorF::randn(&[t, h, w, 4], 1.0, rng);
        let classes: Vec<u32> = (0..t * h * w).map(|_| rng.int_inclusive(0, 3) as u32).collect();
        let analytic = loss::crossentropy_loss(&logits, &classes)?.grad;
        compare(&[logits], &[analytic], |x| Ok(loss::crossentropy_loss(&x[0], &classes)?.value), eps)
    }
}

fn weights_to_list(w: &AttentionWeights) -> Vec<TensorF> {
    w.named().iter().map(|(_, t)| (*t).clone()).collect()
}

fn weights_from_list(v: &[TensorF]) -> AttentionWeights {
    AttentionWeights {
        query: v[0].clone(),
        key: v[1].clone(),
        value: v[2].clone(),
        output: v[3].clone(),
        output_bias: v[4].clone(),
    }
}

fn dot(a: &TensorF, b: &TensorF) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `kind`: 0 cross-frame mean, 1 cross-frame max, 2 self attention.
fn attention_component(kind: usize, settings: &SuiteSettings) -> impl FnMut(&mut Rng) -> Result<(f64, f64)> {
    let eps = settings.eps;
    move |rng: &mut Rng| {
        let c = FEATURE_SHAPE[3];
        let x = TensorF::randn(&FEATURE_SHAPE, 1.0, rng);
        let mut w = AttentionWeights::init(c, c, c, c, 1.0, rng);
        w.output_bias = TensorF::randn(&[c], 0.1, rng);
        let run = |x: &TensorF, w: &AttentionWeights| match kind {
            0 => attention::spatio_temporal_attention(x, w, TemporalPooling::Mean),
            1 => attention::spatio_temporal_attention(x, w, TemporalPooling::Max),
            _ => attention::self_attention(x, w),
        };
        let (out, trace) = run(&x, &w)?;
        let probe = TensorF::randn(out.shape(), 1.0, rng);
        let g = attention::attention_backward(&trace, &w, &probe)?;
        let mut inputs = vec![x];
        inputs.extend(weights_to_list(&w));
        let mut analytic = vec![g.input];
        analytic.extend(weights_to_list(&g.weights));
        compare(
            &inputs,
            &analytic,
            |v| Ok(dot(&run(&v[0], &weights_from_list(&v[1..]))?.0, &probe)),
            eps,
        )
    }
}

fn tag_attention_component(settings: &SuiteSettings) -> impl FnMut(&mut Rng) -> Result<(f64, f64)> {
    let eps = settings.eps;
    move |rng: &mut Rng| {
        let c = FEATURE_SHAPE[3];
        let hw = (FEATURE_SHAPE[1], FEATURE_SHAPE[2]);
        let tags = TensorF::uniform(&TAG_SHAPE, 0.0, 1.0, rng);
        let w = TagAttentionWeights::init(c, c, c, c, rng);
        let run = |t: &TensorF, w: &TagAttentionWeights| attention::tag_based_attention(t, hw, w, TemporalPooling::Mean);
        let (out, trace) = run(&tags, &w)?;
        let probe = TensorF::randn(out.shape(), 1.0, rng);
        let g = attention::tag_based_attention_backward(&trace, &w, &probe)?;
        let mut inputs = vec![tags, w.expand.clone(), w.expand_bias.clone()];
        inputs.extend(weights_to_list(&w.attention));
        let mut analytic = vec![g.tags, g.weights.expand, g.weights.expand_bias];
        analytic.extend(weights_to_list(&g.weights.attention));
        compare(
            &inputs,
            &analytic,
            |v| {
                let w = TagAttentionWeights {
                    expand: v[1].clone(),
                    expand_bias: v[2].clone(),
                    attention: weights_from_list(&v[3..]),
                };
                Ok(dot(&run(&v[0], &w)?.0, &probe))
            },
            eps,
        )
    }
}

/// Names of the suite's components in report order.
pub const COMPONENTS: [&str; 9] = [
    "spatial_intra",
    "spatial_inter",
    "temporal_grouping",
    "temporal_separation",
    "crossentropy",
    "st_attention_mean",
    "st_attention_max",
    "self_attention",
    "tag_attention",
];

/// Checks every loss term and attention block at `settings.points` random
/// points each.
pub fn gradient_suite(settings: &SuiteSettings) -> Result<Vec<ComponentCheck>> {
    let mut out = Vec::with_capacity(COMPONENTS.len());
    for (k, &name) in COMPONENTS.iter().enumerate() {
        let mut point: Box<PointFn> = match k {
            0..=3 => Box::new(tag_component(k, settings)),
            4 => Box::new(crossentropy_component(settings)),
            5..=7 => Box::new(attention_component(k - 5, settings)),
            _ => Box::new(tag_attention_component(settings)),
        };
        let mut rng = Rng::derive(settings.seed, &[k as u64]);
        let mut worst = 0.0f64;
        let mut unstable = 0.0f64;
        for _ in 0..settings.points {
            let (err, drift) = point(&mut rng)?;
            worst = worst.max(err);
            unstable = unstable.max(drift);
        }
        let status = if unstable > settings.tolerance {
            CheckStatus::Inconclusive
        } else if worst < settings.tolerance {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        out.push(ComponentCheck {
            name,
            points: settings.points,
            worst,
            status,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> TensorF {
        TensorF::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn square_sum() {
        let g = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &t(&[1.0, 2.0]), 1e-4)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(3.5), &t(&[0.3, -1.0, 8.0]), 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hinge_of_absolute_difference() {
        // max(0, 3 − |x0 − x1|) at (0.1, 0.9): d/dx0 = +1, d/dx1 = −1.
        let f = |x: &TensorF| Ok((3.0 - (x.data()[0] - x.data()[1]).abs()).max(0.0));
        let g = finite_diff_grad(f, &t(&[0.1, 0.9]), 1e-4).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
        assert!((g.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(matches!(
            finite_diff_grad(|_| Ok(0.0), &t(&[1.0]), 0.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &t(&[1.0]), 1e-4),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relative_error_scales() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[1e-15]), 0.0);
    }

    #[test]
    fn suite_passes_and_guards_tiny_steps() {
        let quick = SuiteSettings { points: 3, ..SuiteSettings::default() };
        let report = gradient_suite(&quick).unwrap();
        assert_eq!(report.len(), COMPONENTS.len());
        for c in &report {
            assert_eq!(c.status, CheckStatus::Pass, "{c:?}");
        }
        assert_eq!(report, gradient_suite(&quick).unwrap());
        let tiny = SuiteSettings { points: 1, eps: 1e-12, ..SuiteSettings::default() };
        for c in gradient_suite(&tiny).unwrap() {
            assert_eq!(c.status, CheckStatus::Inconclusive, "{c:?}");
        }
    }

}
