//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Tuning;
use crate::data::{load_csv, standardize, DomainDataset, DomainMeta, SplitSizes};
use crate::error::{Error, Result};
use crate::federation::{Ablation, TrainConfig};
use crate::model::ModelConfig;
use crate::synth::SynthSpec;

fn d_seed() -> u64 {
    0
}
fn d_rounds() -> usize {
    100
}
fn d_one() -> usize {
    1
}
fn d_lr() -> f64 {
    1e-4
}
fn d_model() -> usize {
    64
}
fn d_heads() -> usize {
    8
}
fn d_patch() -> usize {
    16
}
fn d_vocab() -> usize {
    1000
}
fn d_prototypes() -> usize {
    100
}
fn d_prompt() -> usize {
    12
}
fn d_max_len() -> usize {
    64
}
fn d_depth() -> usize {
    6
}
fn d_true() -> bool {
    true
}
fn d_lookback() -> usize {
    96
}
fn d_horizons() -> Vec<usize> {
    vec![96, 192, 336, 720]
}
fn d_stride() -> usize {
    16
}
fn d_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    /// Relative to the configuration file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    pub channels: usize,
    pub splits: SplitSizes,
    #[serde(default = "d_lookback")]
    pub lookback: usize,
    #[serde(default = "d_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "d_stride")]
    pub stride: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_one")]
    pub oversampling: usize,
    /// Zero-shot targets only: source whose parameters are reused directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuse: Option<String>,
}

/// Experiment file; every global key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_one")]
    pub local_epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_patch")]
    pub patch_len: usize,
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    #[serde(default = "d_prototypes")]
    pub prototypes: usize,
    #[serde(default = "d_prompt")]
    pub prompt_len: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default)]
    pub tuning: Tuning,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "d_true")]
    pub parallel: bool,
    pub domains: Vec<DomainConfig>,
    /// Held-out domains for zero-shot transfer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<DomainConfig>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            patch_len: self.patch_len,
            vocab: self.vocab,
            prototypes: self.prototypes,
            prompt_len: self.prompt_len,
            max_len: self.max_len,
            depth: self.depth,
            tuning: self.tuning,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            lr: self.lr,
            model: self.model(),
            ablation: self.ablation,
            parallel: self.parallel,
        }
    }

    /// Number of per-domain prediction lengths; equal across domains.
    pub fn horizon_count(&self) -> usize {
        self.domains.first().map_or(0, |d| d.horizons.len())
    }

    pub fn validate(&self) -> Result<()> {
        let model = TrainConfig { ablation: self.ablation, ..self.train_config() }.effective_model();
        model.validate()?;
        if self.domains.is_empty() {
            return Err(Error::config("at least one [[domains]] entry is required"));
        }
        let k = self.horizon_count();
        for d in self.domains.iter().chain(&self.targets) {
            if d.csv.is_some() == d.synth.is_some() {
                return Err(Error::config(format!("domain {}: set exactly one of `csv` or `synth`", d.name)));
            }
            if d.horizons.is_empty() {
                return Err(Error::config(format!("domain {}: `horizons` is empty", d.name)));
            }
            if d.horizons.len() != k {
                return Err(Error::config(format!(
                    "domain {} lists {} horizons, {} lists {k}",
                    d.name,
                    d.horizons.len(),
                    self.domains[0].name
                )));
            }
            model.rows(&crate::model::DomainShape { lookback: d.lookback, horizon: d.horizons[0], stride: d.stride })?;
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("domain names must be unique"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }
}

impl DomainConfig {
    pub fn meta(&self, domain_id: usize, horizon_index: usize) -> DomainMeta {
        DomainMeta {
            domain_id,
            name: self.name.clone(),
            channels: self.channels,
            splits: self.splits,
            lookback: self.lookback,
            horizon: self.horizons[horizon_index],
            stride: self.stride,
            batch_size: self.batch_size,
            oversampling: self.oversampling,
        }
    }

    /// Loads (or generates) and standardizes the series for one horizon.
    pub fn load(&self, base_dir: &Path, domain_id: usize, horizon_index: usize) -> Result<DomainDataset> {
        let meta = self.meta(domain_id, horizon_index);
        let ds = match (&self.csv, &self.synth) {
            (Some(p), None) => load_csv(base_dir.join(p), meta)?,
            (None, Some(spec)) => spec.dataset(meta)?,
            _ => return Err(Error::config(format!("domain {}: set exactly one of `csv` or `synth`", self.name))),
        };
        Ok(standardize(ds))
    }
}
