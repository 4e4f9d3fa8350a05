//! Subcommand implementations over an output directory:
//!
//! ```text
//! out/config.toml         resolved configuration
//! out/meta.json           wall-clock timings (the only non-deterministic file)
//! out/h{k}/round_log.csv  one directory per prediction-length index k
//! out/h{k}/best.json      checkpoint of the best validation round
//! out/report.{json,csv}   eval
//! out/fewshot-{pct}/      fewshot, same layout
//! out/zeroshot/           zeroshot
//! out/prompts/            inspect-prompts
//! out/data/               synth-gen
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DomainConfig, ExperimentConfig};
use crate::data::{write_csv, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, Candidate, MetricEntry, MetricReport};
use crate::federation::{write_round_log, Checkpoint, ClientSnapshot, Federation};
use crate::model::{self, Model};

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Protocol(format!(
                "{} is in use by another run (remove {} if stale)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub version: String,
    pub wall_seconds: f64,
}

fn write_meta(out: &Path, command: &str, started: Instant) -> Result<()> {
    let meta = Meta {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn horizon_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("h{k}"))
}

/// Standardized datasets for horizon index `k`.
pub fn load_domains(cfg: &ExperimentConfig, domains: &[DomainConfig], k: usize) -> Result<Vec<DomainDataset>> {
    domains.iter().enumerate().map(|(i, d)| d.load(&cfg.base_dir, i, k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub horizon_index: usize,
    pub best_round: Option<usize>,
    pub best_avg_val_loss: Option<f64>,
}

fn train_horizon(cfg: &ExperimentConfig, datasets: &[DomainDataset], dir: &Path, k: usize) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    let mut fed = Federation::new(cfg.train_config(), datasets)?;
    fed.run()?;
    write_round_log(dir.join("round_log.csv"), &fed.log)?;
    fed.checkpoint(fed.best()).write(dir.join("best.json"))?;
    Ok(TrainOutcome { horizon_index: k, best_round: fed.best().round, best_avg_val_loss: fed.best().avg_val_loss })
}

fn snapshot_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Federated training, one run per prediction-length index.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TrainOutcome>> {
    let _lock = OutputLock::acquire(out)?;
    let started = Instant::now();
    snapshot_config(cfg, out)?;
    let mut outcomes = Vec::new();
    for k in 0..cfg.horizon_count() {
        let datasets = load_domains(cfg, &cfg.domains, k)?;
        outcomes.push(train_horizon(cfg, &datasets, &horizon_dir(out, k), k)?);
    }
    write_meta(out, "train", started)?;
    Ok(outcomes)
}

fn load_states(dir: &Path) -> Result<(Checkpoint, Vec<ClientSnapshot>)> {
    let path = dir.join("best.json");
    if !path.exists() {
        return Err(Error::config(format!("no checkpoint at {}; run `train` first", path.display())));
    }
    let ck = Checkpoint::read(&path)?;
    let states = ck.client_states()?;
    Ok((ck, states))
}

fn evaluate_dir(cfg: &ExperimentConfig, dir_of: impl Fn(usize) -> PathBuf, split: Split, excluded: &[BTreeSet<String>]) -> Result<MetricReport> {
    let mut entries = Vec::new();
    for k in 0..cfg.horizon_count() {
        let datasets = load_domains(cfg, &cfg.domains, k)?;
        let skip = excluded.get(k).cloned().unwrap_or_default();
        let states = if skip.len() == datasets.len() { None } else { Some(load_states(&dir_of(k))?) };
        for ds in &datasets {
            if skip.contains(ds.name()) {
                entries.push(MetricEntry { domain: ds.name().into(), horizon: ds.meta.horizon, mse: None, mae: None, source: None });
                continue;
            }
            let (ck, states) = states.as_ref().expect("some domain is evaluated");
            let state = states
                .iter()
                .find(|s| s.name == ds.name())
                .ok_or_else(|| Error::Schema(format!("checkpoint has no parameters for {}", ds.name())))?;
            let model = ck.config.effective_model();
            let ev = evaluation::evaluate(&model, state, ds, split, cfg.parallel)?;
            entries.push(MetricEntry {
                domain: ds.name().into(),
                horizon: ds.meta.horizon,
                mse: Some(ev.metrics.mse),
                mae: Some(ev.metrics.mae),
                source: None,
            });
        }
    }
    Ok(MetricReport::new(entries))
}

/// Evaluates the best checkpoints of a previous `train` into `report.{json,csv}`.
pub fn eval(cfg: &ExperimentConfig, out: &Path, split: Split) -> Result<MetricReport> {
    let _lock = OutputLock::acquire(out)?;
    let report = evaluate_dir(cfg, |k| horizon_dir(out, k), split, &[])?;
    report.write_json(out.join("report.json"))?;
    report.write_csv(out.join("report.csv"))?;
    Ok(report)
}

pub fn fewshot_dir(out: &Path, fraction: f64) -> PathBuf {
    out.join(format!("fewshot-{}", fraction * 100.0))
}

/// Trains on the leading `fraction` of every training split and reports
/// test metrics. Domains without a full training window are excluded.
pub fn fewshot(cfg: &ExperimentConfig, out: &Path, fraction: f64) -> Result<MetricReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    let _lock = OutputLock::acquire(out)?;
    let started = Instant::now();
    let dir = fewshot_dir(out, fraction);
    fs::create_dir_all(&dir)?;
    snapshot_config(cfg, &dir)?;
    let mut excluded = Vec::new();
    for k in 0..cfg.horizon_count() {
        let mut kept = Vec::new();
        let mut skip = BTreeSet::new();
        for ds in load_domains(cfg, &cfg.domains, k)? {
            let ds = ds.with_train_fraction(fraction)?;
            match ds.window_starts(Split::Train) {
                Ok(_) => kept.push(ds),
                Err(Error::EmptySplit(msg)) => {
                    log::warn!("excluded from few-shot: {msg}");
                    skip.insert(ds.name().to_string());
                }
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            return Err(Error::Protocol(format!(
                "every domain is excluded at fraction {fraction} for horizon index {k}"
            )));
        }
        train_horizon(cfg, &kept, &horizon_dir(&dir, k), k)?;
        excluded.push(skip);
    }
    let report = evaluate_dir(cfg, |k| horizon_dir(&dir, k), Split::Test, &excluded)?;
    report.write_json(dir.join("report.json"))?;
    report.write_csv(dir.join("report.csv"))?;
    write_meta(&dir, "fewshot", started)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub target: String,
    pub horizon: usize,
    pub chosen: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub metrics: MetricReport,
    pub selections: Vec<Selection>,
    /// Per horizon index, checksum of every source before and after.
    pub checksums_before: Vec<Vec<String>>,
    pub checksums_after: Vec<Vec<String>>,
}

/// Transfers the sources trained by `train` to the configured targets.
pub fn zeroshot(cfg: &ExperimentConfig, out: &Path) -> Result<ZeroShotReport> {
    if cfg.targets.is_empty() {
        return Err(Error::config("zero-shot needs at least one [[targets]] entry"));
    }
    let _lock = OutputLock::acquire(out)?;
    let dir = out.join("zeroshot");
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    let mut selections = Vec::new();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for k in 0..cfg.horizon_count() {
        let (ck, sources) = load_states(&horizon_dir(out, k))?;
        let model = ck.config.effective_model();
        before.push(sources.iter().map(evaluation::source_checksum).collect::<Vec<_>>());
        let targets: Vec<DomainDataset> = cfg
            .targets
            .iter()
            .enumerate()
            .map(|(i, d)| d.load(&cfg.base_dir, cfg.domains.len() + i, k))
            .collect::<Result<_>>()?;
        for (t, tc) in targets.iter().zip(&cfg.targets) {
            let tr = evaluation::zero_shot(&model, &sources, t, tc.reuse.as_deref(), cfg.parallel)?;
            entries.push(MetricEntry {
                domain: t.name().into(),
                horizon: t.meta.horizon,
                mse: Some(tr.test.metrics.mse),
                mae: Some(tr.test.metrics.mae),
                source: Some(tr.chosen.clone()),
            });
            selections.push(Selection { target: t.name().into(), horizon: t.meta.horizon, chosen: tr.chosen, candidates: tr.candidates });
        }
        after.push(sources.iter().map(evaluation::source_checksum).collect::<Vec<_>>());
    }
    let report = ZeroShotReport { metrics: MetricReport::new(entries), selections, checksums_before: before, checksums_after: after };
    if report.checksums_before != report.checksums_after {
        return Err(Error::Protocol("zero-shot evaluation modified source parameters".into()));
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    report.metrics.write_csv(dir.join("report.csv"))?;
    Ok(report)
}

/// `|A ∩ B| / |A ∪ B|`, 1 for two empty sets.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Exports attention scores, prototype totals and selections of test
/// sample `index` for every domain, plus cross-domain selection overlap.
pub fn inspect_prompts(cfg: &ExperimentConfig, out: &Path, horizon_index: usize, index: usize) -> Result<PathBuf> {
    if horizon_index >= cfg.horizon_count() {
        return Err(Error::config(format!("horizon index {horizon_index} out of range")));
    }
    let _lock = OutputLock::acquire(out)?;
    let (ck, states) = load_states(&horizon_dir(out, horizon_index))?;
    let model_cfg = ck.config.effective_model();
    if model_cfg.prompt_len == 0 {
        return Err(Error::config("prompt adaption is disabled in this checkpoint"));
    }
    let dir = out.join("prompts");
    fs::create_dir_all(&dir)?;
    let datasets = load_domains(cfg, &cfg.domains, horizon_index)?;
    let mut sets = Vec::new();
    for ds in &datasets {
        let state = states
            .iter()
            .find(|s| s.name == ds.name())
            .ok_or_else(|| Error::Schema(format!("checkpoint has no parameters for {}", ds.name())))?;
        let samples: Vec<_> = model::prepare_split(ds, Split::Test, model_cfg.patch_len)?.into_iter().flatten().collect();
        let sample = samples.get(index).ok_or_else(|| {
            Error::Contract(format!("sample {index} out of range; {} has {} test samples", ds.name(), samples.len()))
        })?;
        let m = Model { config: &model_cfg, encoder: &state.encoder, backbone: &state.backbone, head: &state.head };
        let fc = model::forecast(&m, std::slice::from_ref(sample), false)?.remove(0);
        let ddir = dir.join(ds.name());
        fs::create_dir_all(&ddir)?;
        for (h, sel) in fc.selection.heads.iter().enumerate() {
            let mut w = csv::Writer::from_path(ddir.join(format!("head{h}_scores.csv")))?;
            let mut header = vec!["prototype".to_string()];
            header.extend((0..sel.scores.cols()).map(|b| format!("patch{b}")));
            w.write_record(&header)?;
            for v in 0..sel.scores.rows() {
                let mut rec = vec![v.to_string()];
                rec.extend(sel.scores.row(v).iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(ddir.join(format!("head{h}_totals.csv")))?;
            w.write_record(["prototype", "total"])?;
            for (v, t) in sel.totals.iter().enumerate() {
                w.write_record([v.to_string(), t.to_string()])?;
            }
            w.flush()?;
        }
        let mut w = csv::Writer::from_path(ddir.join("selected.csv"))?;
        let mut header = vec!["rank".to_string()];
        header.extend((0..fc.selection.heads.len()).map(|h| format!("head{h}")));
        w.write_record(&header)?;
        for r in 0..model_cfg.prompt_len {
            let mut rec = vec![r.to_string()];
            rec.extend(fc.selection.heads.iter().map(|s| s.indices[r].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        sets.push((ds.name().to_string(), fc.selection.index_set()));
    }
    let mut w = csv::Writer::from_path(dir.join("overlap.csv"))?;
    let mut header = vec!["domain".to_string()];
    header.extend(sets.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for (n, a) in &sets {
        let mut rec = vec![n.clone()];
        rec.extend(sets.iter().map(|(_, b)| jaccard(a, b).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(dir)
}

/// Writes every synthetic domain and target as a CSV the loader accepts.
pub fn synth_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let _lock = OutputLock::acquire(out)?;
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (i, d) in cfg.domains.iter().chain(&cfg.targets).enumerate() {
        let Some(spec) = &d.synth else { continue };
        let ds = spec.dataset(d.meta(i, 0))?;
        let path = dir.join(format!("{}.csv", d.name));
        write_csv(&path, &ds)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::config("no domain has a `synth` section"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_examples() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [3, 4].into();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &b), 0.25);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(Error::Protocol(_))));
        drop(first);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
