//! Metrics, reports and the transfer protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::federation::ClientSnapshot;
use crate::model::{self, DomainShape, Model, ModelConfig, PreparedSample};
use crate::params::ParamGroup;

/// Pooled errors over every window and channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

pub fn metrics<'a, I>(pairs: I) -> Metrics
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (pred, target) in pairs {
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            se += e * e;
            ae += e.abs();
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    Metrics { mse: se / d, mae: ae / d, count: n }
}

/// Stored forecasts with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Errors out unless `head` fits the domain; the transfer protocol relies on it.
pub fn check_compatible(cfg: &ModelConfig, state: &ClientSnapshot, shape: &DomainShape) -> Result<()> {
    let rows = cfg.rows(shape)?;
    let want = (rows * cfg.d_model, shape.horizon);
    let have = (state.head.input_dim(), state.head.horizon());
    if want != have {
        return Err(Error::Transfer(format!(
            "parameters of {} map {} features to {} steps, target needs {} to {}",
            state.name, have.0, have.1, want.0, want.1
        )));
    }
    Ok(())
}

pub fn evaluate_samples(
    cfg: &ModelConfig,
    state: &ClientSnapshot,
    samples: &[PreparedSample],
    parallel: bool,
) -> Result<Evaluation> {
    let m = Model { config: cfg, encoder: &state.encoder, backbone: &state.backbone, head: &state.head };
    let fc = model::forecast(&m, samples, parallel)?;
    let predictions: Vec<Vec<f64>> = fc.into_iter().map(|f| f.prediction).collect();
    let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.target.data().to_vec()).collect();
    let metrics = metrics(predictions.iter().map(|p| &p[..]).zip(targets.iter().map(|t| &t[..])));
    Ok(Evaluation { metrics, predictions, targets })
}

pub fn domain_shape(ds: &DomainDataset) -> DomainShape {
    DomainShape { lookback: ds.meta.lookback, horizon: ds.meta.horizon, stride: ds.meta.stride }
}

/// Evaluates `state` on one split of a standardized dataset.
pub fn evaluate(
    cfg: &ModelConfig,
    state: &ClientSnapshot,
    ds: &DomainDataset,
    split: Split,
    parallel: bool,
) -> Result<Evaluation> {
    check_compatible(cfg, state, &domain_shape(ds))?;
    let samples: Vec<PreparedSample> = model::prepare_split(ds, split, cfg.patch_len)?.into_iter().flatten().collect();
    evaluate_samples(cfg, state, &samples, parallel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub domain: String,
    pub horizon: usize,
    /// `None` marks a domain excluded from the protocol.
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    /// Parameters used for a transferred domain.
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub domain: String,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    /// Per domain, over its evaluated horizons.
    pub domain_averages: Vec<Average>,
    /// Over the domain averages.
    pub overall: Option<Average>,
}

impl MetricReport {
    pub fn new(entries: Vec<MetricEntry>) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for e in &entries {
            if !names.contains(&e.domain.as_str()) {
                names.push(&e.domain);
            }
        }
        let domain_averages: Vec<Average> = names
            .iter()
            .filter_map(|name| {
                let vals: Vec<(f64, f64)> = entries
                    .iter()
                    .filter(|e| e.domain == *name)
                    .filter_map(|e| Some((e.mse?, e.mae?)))
                    .collect();
                (!vals.is_empty()).then(|| Average {
                    domain: name.to_string(),
                    mse: vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64,
                    mae: vals.iter().map(|v| v.1).sum::<f64>() / vals.len() as f64,
                })
            })
            .collect();
        let overall = (!domain_averages.is_empty()).then(|| {
            let n = domain_averages.len() as f64;
            Average {
                domain: "overall".into(),
                mse: domain_averages.iter().map(|a| a.mse).sum::<f64>() / n,
                mae: domain_averages.iter().map(|a| a.mae).sum::<f64>() / n,
            }
        });
        Self { entries, domain_averages, overall }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Flat `domain,horizon,mse,mae,source` rows; excluded cells hold `-`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["domain", "horizon", "mse", "mae", "source"])?;
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        for e in &self.entries {
            w.write_record([
                e.domain.clone(),
                e.horizon.to_string(),
                cell(e.mse),
                cell(e.mae),
                e.source.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the smallest value, preferring the earlier one on ties.
pub fn argmin(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if *v >= b => best,
            _ => Some((i, *v)),
        })
        .map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source: String,
    /// Validation MSE on the target, `None` if shapes are incompatible.
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub chosen: String,
    pub candidates: Vec<Candidate>,
    pub test: Evaluation,
}

/// Evaluates a target domain with trained source parameters. A target that
/// names a source reuses it directly; otherwise every compatible source is
/// scored on the target validation split and the best one is reported on
/// the test split. Sources are only read.
pub fn zero_shot(
    cfg: &ModelConfig,
    sources: &[ClientSnapshot],
    target: &DomainDataset,
    reuse: Option<&str>,
    parallel: bool,
) -> Result<Transfer> {
    let name = reuse.unwrap_or(target.name());
    if let Some(s) = sources.iter().find(|s| s.name == name) {
        let test = evaluate(cfg, s, target, Split::Test, parallel)?;
        return Ok(Transfer { chosen: s.name.clone(), candidates: Vec::new(), test });
    }
    if reuse.is_some() {
        return Err(Error::Transfer(format!("no source named {name}")));
    }
    let mut candidates = Vec::with_capacity(sources.len());
    for s in sources {
        let val_mse = match check_compatible(cfg, s, &domain_shape(target)) {
            Ok(()) => Some(evaluate(cfg, s, target, Split::Val, parallel)?.metrics.mse),
            Err(Error::Transfer(msg)) => {
                log::info!("skipping source: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        candidates.push(Candidate { source: s.name.clone(), val_mse });
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.val_mse.unwrap_or(f64::INFINITY)).collect();
    let best = argmin(&scores)
        .filter(|i| scores[*i].is_finite())
        .ok_or_else(|| Error::Transfer(format!("no source is shape-compatible with {}", target.name())))?;
    let test = evaluate(cfg, &sources[best], target, Split::Test, parallel)?;
    Ok(Transfer { chosen: sources[best].name.clone(), candidates, test })
}

/// Hex checksums of every parameter group of a source.
pub fn source_checksum(s: &ClientSnapshot) -> String {
    format!("{}:{}:{}", s.encoder.checksum(), s.backbone.checksum(), s.head.checksum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let p = [vec![1.0, 2.0]];
        let m = metrics(p.iter().map(|v| &v[..]).zip(p.iter().map(|v| &v[..])));
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let (pred, target) = (vec![1.0, -1.0], vec![0.0, 0.0]);
        let m = metrics([(&pred[..], &target[..])]);
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        let pred = [0.0, 2.0];
        let m = metrics([(&pred[..], &target[..])]);
        assert_eq!((m.mse, m.mae), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn mae_squared_bounded_by_mse(errs in prop::collection::vec(-5.0f64..5.0, 1..100)) {
            let zeros = vec![0.0; errs.len()];
            let m = metrics([(&errs[..], &zeros[..])]);
            prop_assert!(m.mae * m.mae <= m.mse * (1.0 + 1e-12) + 1e-300);
            prop_assert!(m.mse >= 0.0 && m.mae >= 0.0);
        }
    }

    #[test]
    fn averages_recompute_from_entries() {
        let e = |d: &str, h: usize, mse: Option<f64>| MetricEntry {
            domain: d.into(),
            horizon: h,
            mse,
            mae: mse.map(|v| v / 2.0),
            source: None,
        };
        let r = MetricReport::new(vec![
            e("a", 96, Some(0.1)),
            e("a", 192, Some(0.2)),
            e("a", 336, Some(0.3)),
            e("a", 720, Some(0.4)),
            e("b", 96, None),
        ]);
        assert_eq!(r.domain_averages.len(), 1);
        assert!((r.domain_averages[0].mse - 0.25).abs() < 1e-12);
        assert!((r.overall.as_ref().unwrap().mae - 0.125).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().last().unwrap().starts_with("b,96,-,-"));
    }

    #[test]
    fn argmin_examples() {
        assert_eq!(argmin(&[0.2, 0.5, 0.6]), Some(0));
        assert_eq!(argmin(&[0.5, 0.2, 0.2]), Some(1));
        assert_eq!(argmin(&[]), None);
    }
}
