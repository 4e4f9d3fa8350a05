#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use fedts::backbone::Tuning;
use fedts::config::ExperimentConfig;
use fedts::data::{standardize, DomainDataset, DomainMeta, SplitSizes};
use fedts::federation::{Ablation, TrainConfig};
use fedts::model::ModelConfig;
use fedts::synth::{Sinusoid, SynthSpec};

/// Writes past the test harness capture so the line shows in plain `cargo test` output.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {criterion:>2}: {verdict} {detail}");
}

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn load_config(rel: &str) -> ExperimentConfig {
    ExperimentConfig::load(repo_path(rel)).unwrap()
}

pub struct DomainSpec {
    pub name: &'static str,
    pub specific_period: f64,
    pub horizon: usize,
    pub channels: usize,
}

pub fn synth_domain(id: usize, d: &DomainSpec, seed: u64) -> DomainDataset {
    let spec = SynthSpec {
        length: 160,
        shared: vec![Sinusoid { period: 24.0, amplitude: 1.0 }],
        specific: vec![Sinusoid { period: d.specific_period, amplitude: 0.5 }],
        noise_std: 0.1,
        seed,
    };
    let meta = DomainMeta {
        domain_id: id,
        name: d.name.into(),
        channels: d.channels,
        splits: SplitSizes { train: 90, val: 35, test: 35 },
        lookback: 24,
        horizon: d.horizon,
        stride: 8,
        batch_size: 8,
        oversampling: 1,
    };
    standardize(spec.dataset(meta).unwrap())
}

pub fn small_model(tuning: Tuning) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        patch_len: 8,
        vocab: 64,
        prototypes: 16,
        prompt_len: 4,
        max_len: 16,
        depth: 1,
        tuning,
    }
}

pub fn small_train(rounds: usize, tuning: Tuning, ablation: Ablation) -> TrainConfig {
    TrainConfig { seed: 3, rounds, local_epochs: 1, lr: 1e-3, model: small_model(tuning), ablation, parallel: true }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
