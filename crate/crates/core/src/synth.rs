//! Sinusoid-mixture corpora with a controllable shared component.
//!
//! Every channel is `Σ shared + Σ domain-specific + N(0, σ²)`. Phases depend
//! only on the channel and component index, so the deterministic part of a
//! series is independent of the seed and shared components line up across
//! domains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, DomainMeta};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    /// In time steps.
    pub period: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    #[serde(default)]
    pub shared: Vec<Sinusoid>,
    #[serde(default)]
    pub specific: Vec<Sinusoid>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

/// In `[0, 2π)`.
fn phase(channel: usize, component: usize, salt: f64) -> f64 {
    ((channel as f64 * 0.618_033_988_75 + component as f64 * 0.381_966_011_25 + salt).fract()) * std::f64::consts::TAU
}

fn wave(s: &Sinusoid, t: usize, phi: f64) -> f64 {
    s.amplitude * (std::f64::consts::TAU * t as f64 / s.period + phi).sin()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("synthetic length must be positive"));
        }
        if self.shared.is_empty() && self.specific.is_empty() && self.noise_std == 0.0 {
            return Err(Error::config("synthetic spec has no components and no noise"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise std must be finite and non-negative"));
        }
        for s in self.shared.iter().chain(&self.specific) {
            if !(s.period > 0.0 && s.period.is_finite() && s.amplitude.is_finite()) {
                return Err(Error::config(format!("invalid sinusoid {s:?}")));
            }
        }
        Ok(())
    }

    /// Noise-free shared component of one channel.
    pub fn shared_part(&self, channel: usize) -> Vec<f64> {
        (0..self.length)
            .map(|t| self.shared.iter().enumerate().map(|(j, s)| wave(s, t, phase(channel, j, 0.0))).sum())
            .collect()
    }

    /// Noise-free domain-specific component of one channel.
    pub fn specific_part(&self, channel: usize) -> Vec<f64> {
        (0..self.length)
            .map(|t| self.specific.iter().enumerate().map(|(j, s)| wave(s, t, phase(channel, j, 0.5))).sum())
            .collect()
    }

    /// Channel-major series.
    pub fn generate(&self, channels: usize) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if channels == 0 {
            return Err(Error::config("synthetic domain needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::config(e.to_string()))?;
        Ok((0..channels)
            .map(|c| {
                let shared = self.shared_part(c);
                let specific = self.specific_part(c);
                shared
                    .iter()
                    .zip(&specific)
                    .map(|(a, b)| a + b + if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                    .collect()
            })
            .collect())
    }

    pub fn dataset(&self, meta: DomainMeta) -> Result<DomainDataset> {
        if self.length < meta.splits.total() {
            return Err(Error::config(format!(
                "domain {}: synthetic length {} is shorter than the splits ({})",
                meta.name,
                self.length,
                meta.splits.total()
            )));
        }
        let series = self.generate(meta.channels)?;
        DomainDataset::new(meta, series)
    }
}
