//! Run configuration: every component's settings in one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::NetworkConfig;
use crate::rng::sub_seed;
use crate::synth::{AugmentationSpec, SynthSpec};
use crate::train::TrainSettings;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "VISTAG_SEED";

/// Margin used at desk scale, where tags live in `[0, 1]`.
pub const DESK_MARGIN: f64 = 0.3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every component seed is derived from this one.
    pub seed: u64,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub synth: SynthSpec,
    pub augment: AugmentationSpec,
    pub decode: DecodeConfig,
    pub train: TrainSettings,
    /// Boundary tolerance of the F measure, as a fraction of the diagonal.
    pub diag_tolerance: f64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            network: NetworkConfig::desk(),
            loss: LossConfig {
                margin: DESK_MARGIN,
                ..LossConfig::default()
            },
            synth: SynthSpec::default(),
            augment: AugmentationSpec::default(),
            decode: DecodeConfig::default(),
            train: TrainSettings::default(),
            diag_tolerance: crate::metrics::DEFAULT_DIAG_TOLERANCE,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })
    }

    /// Reads a config file (or the defaults), applies the seed override from
    /// the environment and derives component seeds.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text, p)?
            }
            None => Self::default(),
        };
        let env = std::env::var(SEED_ENV).ok();
        cfg.resolve(env.as_deref())
    }

    /// Applies an optional seed override, derives component seeds and
    /// validates the result.
    pub fn resolve(mut self, seed_override: Option<&str>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        let seed = self.seed;
        self.network.rng_seed = sub_seed(seed, &[0]);
        self.loss.rng_seed = sub_seed(seed, &[1]);
        self.synth.rng_seed = sub_seed(seed, &[2]);
        self.augment.rng_seed = sub_seed(seed, &[3]);
        self.train.shuffle_seed = sub_seed(seed, &[4]);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.synth.validate()?;
        self.augment.validate()?;
        self.decode.validate()?;
        self.train.adam.validate()?;
        if !(self.diag_tolerance > 0.0) {
            return Err(Error::Config("diag_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
