//! Training loop: forward, overall loss, backward and an Adam update per clip.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, InstanceGT, LossBreakdown, LossConfig, SampleKey};
use crate::model::{AdamConfig, ModelState};
use crate::network;
use crate::rng::Rng;
use crate::synth::{self, AugmentationSpec};
use crate::tensor::TensorF;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Optional cap on the total number of steps (0 = no cap).
    pub max_steps: usize,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    pub shuffle_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 100,
            max_steps: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            augment: true,
            shuffle_seed: 0,
        }
    }
}

impl TrainSettings {
    /// Total steps for a dataset of `clips` clips (one clip per step).
    pub fn total_steps(&self, clips: usize) -> usize {
        let n = self.epochs * clips;
        if self.max_steps > 0 {
            n.min(self.max_steps)
        } else {
            n
        }
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub clip: TensorF,
    pub gt: InstanceGT,
}

/// Loss and gradients of one clip without touching the parameters.
pub fn loss_and_grads(state: &ModelState, clip: &TensorF, gt: &InstanceGT, cfg: &LossConfig, key: SampleKey) -> Result<(LossBreakdown, crate::model::ParamMap)> {
    let (tags, scores, trace) = network::forward(clip, state)?;
    let gt_tags = gt.downsample(state.config().tag_downsample())?;
    let classes = gt.class_map();
    let (bd, g_tags, g_scores) = loss::overall_loss(&tags, scores.as_ref(), &gt_tags, &classes, cfg, key)?;
    if !bd.l_overall.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", key.step)));
    }
    let grads = network::backward(&trace, &g_tags, g_scores.as_ref(), state)?;
    Ok((bd, grads))
}

/// Clip order of one epoch.
pub fn epoch_order(clips: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..clips).collect();
    Rng::derive(seed, &[epoch as u64]).shuffle(&mut order);
    order
}

/// Trains `state` in place. `on_step` sees every step's losses and may
/// persist progress; it runs after the parameters were updated.
///
/// A non-finite loss or gradient aborts with a numeric error and leaves the
/// state as it was after the last good step.
pub fn train<F>(
    state: &mut ModelState,
    data: &[Example],
    loss_cfg: &LossConfig,
    aug: &AugmentationSpec,
    settings: &TrainSettings,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(usize, &LossBreakdown, &ModelState) -> Result<()>,
{
    loss_cfg.validate()?;
    aug.validate()?;
    settings.adam.validate()?;
    if data.is_empty() {
        return Ok(());
    }
    let total = settings.total_steps(data.len());
    let mut step = 0usize;
    'outer: for epoch in 0..settings.epochs {
        for idx in epoch_order(data.len(), epoch, settings.shuffle_seed) {
            if step >= total {
                break 'outer;
            }
            let ex = &data[idx];
            let (clip, gt) = if settings.augment {
                synth::augment(&ex.clip, &ex.gt, aug, step as u64)?
            } else {
                (ex.clip.clone(), ex.gt.clone())
            };
            let key = SampleKey { clip: idx as u64, step: step as u64 };
            let (bd, grads) = loss_and_grads(state, &clip, &gt, loss_cfg, key)?;
            state.adam_step(&grads, &settings.adam)?;
            on_step(step, &bd, state)?;
            step += 1;
        }
    }
    Ok(())
}

/// CSV loss log with one row per step.
pub struct LossLog<W: std::io::Write> {
    writer: csv::Writer<W>,
}

/// Column order of the loss log.
pub const LOG_COLUMNS: [&str; 7] = ["step", "l_spectra", "l_specter", "l_tempra", "l_temper", "l_crossentropy", "l_overall"];

impl LossLog<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(file).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

impl<W: std::io::Write> LossLog<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(LOG_COLUMNS).map_err(csv_err)?;
        writer.flush().map_err(|e| Error::io("loss log", e))?;
        Ok(LossLog { writer })
    }

    pub fn record(&mut self, step: usize, bd: &LossBreakdown) -> Result<()> {
        let vals = [bd.l_spectra, bd.l_specter, bd.l_tempra, bd.l_temper, bd.l_crossentropy, bd.l_overall];
        let mut row = vec![step.to_string()];
        row.extend(vals.iter().map(|v| format!("{v:.9e}")));
        self.writer.write_record(&row).map_err(csv_err)?;
        self.writer.flush().map_err(|e| Error::io("loss log", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("loss log", io),
        other => Error::Format {
            path: "loss log".into(),
            msg: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::synth::SynthSpec;

    fn tiny() -> (NetworkConfig, Vec<Example>) {
        let mut cfg = NetworkConfig::desk();
        cfg.frames = 2;
        cfg.height = 16;
        cfg.width = 16;
        let spec = SynthSpec {
            frames: 2,
            height: 16,
            width: 16,
            min_instances: 2,
            max_instances: 2,
            min_size: 0.2,
            max_size: 0.3,
            ..SynthSpec::default()
        };
        let data = (0..2)
            .map(|i| {
                let c = synth::generate_clip(&spec, i).unwrap();
                Example { clip: c.clip, gt: c.gt }
            })
            .collect();
        (cfg, data)
    }

    #[test]
    fn steps_and_log() {
        let (cfg, data) = tiny();
        let mut state = ModelState::init(&cfg).unwrap();
        let settings = TrainSettings { epochs: 2, max_steps: 3, ..TrainSettings::default() };
        assert_eq!(settings.total_steps(2), 3);
        let mut buf = Vec::new();
        {
            let mut log = LossLog::new(&mut buf).unwrap();
            train(&mut state, &data, &LossConfig::default(), &AugmentationSpec::default(), &settings, |s, bd, _| {
                log.record(s, bd)
            })
            .unwrap();
        }
        assert_eq!(state.step(), 3);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,l_spectra,l_specter,l_tempra,l_temper,l_crossentropy,l_overall");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,"));
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = tiny();
        let run = || {
            let mut state = ModelState::init(&cfg).unwrap();
            let mut losses = Vec::new();
            let settings = TrainSettings { epochs: 2, ..TrainSettings::default() };
            train(&mut state, &data, &LossConfig::default(), &AugmentationSpec::default(), &settings, |_, bd, _| {
                losses.push(bd.l_overall);
                Ok(())
            })
            .unwrap();
            (state, losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert!(a == b);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(10, 3, 7);
        assert_eq!(o, epoch_order(10, 3, 7));
        o.sort_unstable();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }
}
