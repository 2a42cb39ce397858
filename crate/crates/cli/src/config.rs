// SPDX-License-Identifier: MIT OR Apache-2.0
//! Run configuration: built-in defaults overlaid by a TOML file, then by flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use residforge_core::directions::{Setting, MIN_SAMPLES};
use residforge_core::editing::{EditMode, DEFAULT_ANCHORS, DEFAULT_SCALE_GRID};
use residforge_core::localization::{TAU_HI, TAU_LO};
use residforge_core::model::{ModelConfig, TrainHyper, DEFAULT_HELDOUT_SIZE, DEFAULT_TRAIN_SIZE};
use residforge_core::synthlab::PlantSpec;
use residforge_core::task::{CANONICAL_TEMPLATE, DEFAULT_SUM_RANGE};
use residforge_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Toy,
    Bridge,
    Synth,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Toy => "toy",
            Backend::Bridge => "bridge",
            Backend::Synth => "synth",
        })
    }
}

/// Inclusive 1-based layer range written `a..b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    /// 0-based layer indices, checked against the model depth.
    pub fn indices(&self, n_layers: usize) -> Result<Vec<usize>> {
        if self.last > n_layers {
            return Err(Error::OutOfRange(format!(
                "layers {self} on a {n_layers}-layer model"
            )));
        }
        Ok((self.first - 1..self.last).collect())
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer range {s:?} is not `a..b` with 1 <= a <= b"));
        let (a, b) = match s.split_once("..") {
            Some((a, b)) => (a, b),
            None => (s, s),
        };
        let first: usize = a.trim().parse().map_err(|_| bad())?;
        let last: usize = b.trim().parse().map_err(|_| bad())?;
        if first == 0 || first > last {
            return Err(bad());
        }
        Ok(LayerRange { first, last })
    }
}

impl TryFrom<String> for LayerRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerRange> for String {
    fn from(r: LayerRange) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Templates mixed into the training data round-robin.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSection {
    pub modes: Vec<EditMode>,
    pub c_ref: i64,
    /// Calibrated scale values; the grid is their square.
    pub grid: Vec<f64>,
    pub anchors: usize,
    pub max_targets: Option<usize>,
    /// 1-based layers pooled in the delta-stratified table; all when empty.
    pub delta_layers: Vec<usize>,
    /// Templates evaluated by `transport`.
    pub transport_templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: Backend,
    /// Toy checkpoint for the `toy` backend.
    pub checkpoint: Option<PathBuf>,
    /// `tcp://host:port` or `stdio:command args` for the `bridge` backend.
    pub endpoint: Option<String>,
    /// Template used for evaluation prompts.
    pub template: String,
    pub sum_range: (u32, u32),
    /// All layers when unset.
    pub layers: Option<LayerRange>,
    /// Instances for baselines, ablation and editing prompts.
    pub instances: usize,
    /// Source-target pairs for patching.
    pub pairs: usize,
    pub setting: Setting,
    /// Alignment rank; the setting's default when unset.
    pub rank: Option<usize>,
    /// Minimum collected prompts per (context, value) cell.
    pub per_cell: usize,
    pub min_samples: usize,
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub train: TrainSection,
    pub edit: EditSection,
    /// Planted population for the `synth` backend.
    pub synth: PlantSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: Backend::Toy,
            checkpoint: None,
            endpoint: None,
            template: CANONICAL_TEMPLATE.into(),
            sum_range: DEFAULT_SUM_RANGE,
            layers: None,
            instances: 2000,
            pairs: 200,
            setting: Setting::OnesDigit,
            rank: None,
            per_cell: MIN_SAMPLES,
            min_samples: MIN_SAMPLES,
            tau_hi: TAU_HI,
            tau_lo: TAU_LO,
            train: TrainSection {
                model: ModelConfig::default(),
                hyper: TrainHyper::default(),
                n_train: DEFAULT_TRAIN_SIZE,
                n_heldout: DEFAULT_HELDOUT_SIZE,
                templates: ["canonical", "prompt1", "prompt2", "prompt3"]
                    .map(String::from)
                    .to_vec(),
            },
            edit: EditSection {
                modes: EditMode::all().to_vec(),
                c_ref: 0,
                grid: DEFAULT_SCALE_GRID.to_vec(),
                anchors: DEFAULT_ANCHORS,
                max_targets: None,
                delta_layers: Vec::new(),
                transport_templates: ["canonical", "prompt1", "prompt2", "prompt3"]
                    .map(String::from)
                    .to_vec(),
            },
            synth: PlantSpec {
                d: 64,
                values: (0..10).collect(),
                rank: 8,
                angle: 2.5,
                noise: 0.01,
                per_cell: 40,
                ..PlantSpec::default()
            },
        }
    }
}

/// Overlay `patch` onto `base`. Every key in `patch` must exist in `base`.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown key {here:?}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let patch: Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, patch, "")?;
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sum_range;
        if lo > hi {
            return Err(Error::Config(format!("empty sum range {lo}..={hi}")));
        }
        if !(0.0..=1.0).contains(&self.tau_lo) || !(0.0..=1.0).contains(&self.tau_hi) {
            return Err(Error::Config(
                "boundary thresholds must lie in [0, 1]".into(),
            ));
        }
        if self.edit.grid.is_empty() || self.edit.modes.is_empty() {
            return Err(Error::Config(
                "edit grid and modes must be non-empty".into(),
            ));
        }
        if let Some(p) = &self.checkpoint {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}
