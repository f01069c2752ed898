//! `vistag` subcommands.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};

use crate::config::RunConfig;
use crate::dataset::{self, InstanceRecord};
use crate::decode;
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckStatus, SuiteSettings};
use crate::metrics::{self, MetricSet};
use crate::model::ModelState;
use crate::train::{self, Example, LossLog};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const IO_OR_CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "loss_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "vistag", version, about = "Bottom-up video instance segmentation with per-pixel tags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic moving-shapes dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of clips (overrides the config).
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a frame directory with a trained checkpoint.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "j,f,ap")]
        metrics: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the JSON report (default: `<pred>/report.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term and attention block.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = SuiteSettings::default().eps)]
        eps: f64,
        #[arg(long, default_value_t = SuiteSettings::default().points)]
        points: usize,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => exit::NUMERIC,
        _ => exit::IO_OR_CONFIG,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    info!("resolved config:\n{}", cfg.to_json());
    Ok(cfg)
}

fn require(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config paths)")))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth { config, out, clips } => cmd_synth(config.as_deref(), out, clips),
        Command::Train { config, data, out } => cmd_train(config.as_deref(), data, out),
        Command::Infer { config, ckpt, frames, out } => cmd_infer(config.as_deref(), &ckpt, &frames, &out),
        Command::Eval { pred, gt, metrics, config, out } => cmd_eval(&pred, &gt, &metrics, config.as_deref(), out),
        Command::Gradcheck { config, seed, eps, points } => cmd_gradcheck(config.as_deref(), seed, eps, points),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_synth(config: Option<&Path>, out: Option<PathBuf>, clips: Option<usize>) -> Result<i32> {
    let cfg = load_config(config)?;
    let out = require(out, &cfg.paths.out, "output directory")?;
    let mut spec = cfg.synth.clone();
    if let Some(n) = clips {
        spec.clips = n;
    }
    let m = dataset::write_synthetic_dataset(&out, &spec)?;
    info!("wrote {} clips to {}", m.clips.len(), out.display());
    Ok(exit::OK)
}

/// Loads every clip of a dataset as training examples.
pub fn load_examples(data: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (name, dir) in dataset::clip_dirs(data)? {
        let clip = dataset::read_clip(&dir)?;
        let frames = clip
            .frames
            .ok_or_else(|| Error::format(&dir, format!("clip {name} has no frames")))?;
        out.push(Example { clip: frames, gt: clip.gt });
    }
    Ok(out)
}

pub fn cmd_train(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<i32> {
    let cfg = load_config(config)?;
    let data = require(data, &cfg.paths.data, "dataset directory")?;
    let out = require(out, &cfg.paths.out, "output directory")?;
    let examples = load_examples(&data)?;
    let net = &cfg.network;
    for (i, ex) in examples.iter().enumerate() {
        let (t, h, w, _) = ex.clip.dims4()?;
        if (t, h, w) != (net.frames, net.height, net.width) {
            return Err(Error::Dimension(format!(
                "clip {i} is {t}×{h}×{w} but the network takes {}×{}×{}",
                net.frames, net.height, net.width
            )));
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_json() + "\n")
        .map_err(|e| Error::io(out.join(RESOLVED_CONFIG_FILE), e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut state = ModelState::init(net)?;
    state.save(&ckpt)?;
    let mut log = LossLog::create(&out.join(LOG_FILE))?;
    let total = cfg.train.total_steps(examples.len());
    info!("training {total} steps on {} clips", examples.len());
    let every = cfg.train.checkpoint_every;
    let result = train::train(&mut state, &examples, &cfg.loss, &cfg.augment, &cfg.train, |step, bd, st| {
        log.record(step, bd)?;
        if step % 50 == 0 {
            info!("step {step}: loss {:.5}", bd.l_overall);
        }
        if every > 0 && (step + 1) % every == 0 {
            st.save(&ckpt)?;
        }
        Ok(())
    });
    match result {
        Ok(()) => {
            state.save(&ckpt)?;
            info!("checkpoint written to {}", ckpt.display());
            Ok(exit::OK)
        }
        Err(e @ Error::Numeric(_)) => {
            // The in-memory state is the last good one.
            state.save(&ckpt)?;
            warn!("training aborted; kept the checkpoint of step {}", state.step());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_infer(config: Option<&Path>, ckpt: &Path, frames: &Path, out: &Path) -> Result<i32> {
    let cfg = load_config(config)?;
    let state = ModelState::load(ckpt)?;
    let clip = dataset::read_frames(frames)?;
    let inf = decode::run_inference(&clip, &state, &cfg.decode)?;
    let records: Vec<InstanceRecord> = inf
        .result
        .instances
        .iter()
        .map(|i| InstanceRecord { id: i.id, class_id: i.class_id, confidence: Some(i.confidence) })
        .collect();
    dataset::write_clip(out, None, &inf.result.labels, &records, Some(inf.kept), Some(inf.interpolated))?;
    info!("{} instances written to {}", records.len(), out.display());
    Ok(exit::OK)
}

pub fn cmd_eval(pred: &Path, gt: &Path, which: &str, config: Option<&Path>, out: Option<PathBuf>) -> Result<i32> {
    let cfg = load_config(config)?;
    let which = MetricSet::parse(which)?;
    let pred_dirs = dataset::clip_dirs(pred)?;
    let gt_dirs = dataset::clip_dirs(gt)?;
    let single = pred_dirs.len() == 1 && gt_dirs.len() == 1 && !dataset::is_dataset(gt);
    let mut pairs = Vec::new();
    let mut gaps = Vec::new();
    for (name, gdir) in &gt_dirs {
        let pdir = if single {
            pred_dirs[0].1.clone()
        } else {
            match pred_dirs.iter().find(|(n, _)| n == name) {
                Some((_, d)) => d.clone(),
                None => {
                    gaps.push(format!("{name}: no prediction"));
                    continue;
                }
            }
        };
        let g = dataset::read_clip(gdir)?;
        let p = dataset::read_clip(&pdir)?;
        if p.manifest.frames != g.manifest.frames {
            let missing: Vec<String> = (p.manifest.frames..g.manifest.frames).map(|t| t.to_string()).collect();
            gaps.push(format!(
                "{name}: {} predicted frames for {} ground-truth frames (missing {})",
                p.manifest.frames,
                g.manifest.frames,
                if missing.is_empty() { "none".into() } else { missing.join(", ") }
            ));
            continue;
        }
        pairs.push((p.decoded(), g.gt));
    }
    if !gaps.is_empty() {
        return Err(Error::format(pred, format!("missing frames: {}", gaps.join("; "))));
    }
    let report = metrics::evaluate(&pairs, cfg.network.classes as u32, cfg.diag_tolerance, which)?;
    print!("{}", report.table());
    let out = out.unwrap_or_else(|| pred.join(REPORT_FILE));
    dataset::write_report(&out, &report.percent())?;
    Ok(exit::OK)
}

pub fn cmd_gradcheck(config: Option<&Path>, seed: Option<u64>, eps: f64, points: usize) -> Result<i32> {
    let cfg = load_config(config)?;
    let settings = SuiteSettings {
        seed: seed.unwrap_or(cfg.seed),
        eps,
        points,
        margin: cfg.loss.margin,
        ..SuiteSettings::default()
    };
    let report = gradcheck::gradient_suite(&settings)?;
    let mut code = exit::OK;
    for c in &report {
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Inconclusive => "inconclusive",
        };
        println!("{:<22} worst relative error {:>10.3e}  {status}", c.name, c.worst);
        if c.status != CheckStatus::Pass {
            code = exit::CHECK_FAILED;
        }
    }
    Ok(code)
}
