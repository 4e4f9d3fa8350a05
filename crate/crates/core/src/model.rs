//! End-to-end forward pass and gradients for one client's model.
//!
//! Prototype queries do not depend on the sample, so a training step runs
//! in two stages: a shared graph computes `Q_h = (Wpᵀ E) W_q,h` once per
//! batch, per-sample graphs treat each `Q_h` as a leaf, and the summed
//! query gradients are pushed back through the shared graph. Per-sample
//! gradients are reduced in sample order, which keeps the result
//! independent of the execution mode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneDims, BackboneParams, Tuning};
use crate::data::{instance_normalize, DomainDataset, Split, make_patches, patch_count, WindowSample, INSTANCE_EPS};
use crate::encoder::{self, EncoderDims, EncoderParams, EncoderVars, PromptSelection};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::head::{self, HeadParams};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub patch_len: usize,
    pub vocab: usize,
    pub prototypes: usize,
    pub prompt_len: usize,
    pub max_len: usize,
    pub depth: usize,
    pub tuning: Tuning,
}

impl ModelConfig {
    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            d_model: self.d_model,
            heads: self.heads,
            patch_len: self.patch_len,
            vocab: self.vocab,
            prototypes: self.prototypes,
            prompt_len: self.prompt_len,
        }
    }

    pub fn backbone_dims(&self) -> BackboneDims {
        BackboneDims {
            d_model: self.d_model,
            heads: self.heads,
            vocab: self.vocab,
            max_len: self.max_len,
            depth: self.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_dims().validate()
    }

    /// Backbone input rows for a domain, checked against `max_len`.
    pub fn rows(&self, shape: &DomainShape) -> Result<usize> {
        let b = patch_count(shape.lookback, self.patch_len, shape.stride)?;
        let rows = self.prompt_len + b;
        if rows > self.max_len {
            return Err(Error::config(format!(
                "{} prompt + {b} patch tokens exceed max_len {}",
                self.prompt_len, self.max_len
            )));
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainShape {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

/// A normalized, patched sample ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub patches: Tensor,
    /// Standardized-scale target.
    pub target: Tensor,
    pub stats: (f64, f64),
}

pub fn prepare(sample: WindowSample, patch_len: usize, stride: usize) -> Result<PreparedSample> {
    let w = instance_normalize(sample);
    let stats = w.norm_stats.expect("set by instance_normalize");
    let p = make_patches(&w.input, patch_len, stride)?;
    let target = Tensor::matrix(1, w.target.len(), w.target)?;
    Ok(PreparedSample { patches: p.patches, target, stats })
}

/// Prepared samples of a split grouped by window start, channels in order.
pub fn prepare_split(ds: &DomainDataset, split: Split, patch_len: usize) -> Result<Vec<Vec<PreparedSample>>> {
    ds.window_starts(split)?
        .into_iter()
        .map(|start| {
            (0..ds.channels())
                .map(|c| prepare(ds.sample(start, c), patch_len, ds.meta.stride))
                .collect()
        })
        .collect()
}

/// Borrowed view of every parameter group one client uses.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub config: &'a ModelConfig,
    pub encoder: &'a EncoderParams,
    pub backbone: &'a BackboneParams,
    pub head: &'a HeadParams,
}

/// Gradients keyed by [`ParamGroup`] names; absent names had zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelGrads {
    pub encoder: BTreeMap<String, Tensor>,
    pub backbone: BTreeMap<String, Tensor>,
    pub head: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: ModelGrads,
}

/// Per-sample trainable leaves and where their gradients go.
enum Slot {
    Encoder(String),
    Query(usize),
    Backbone(String),
    Head(String),
}

fn prototype_queries(m: &Model<'_>) -> Result<Vec<Tensor>> {
    if m.config.prompt_len == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let e = g.constant(&m.backbone.embedding);
    let pw = g.constant(&m.encoder.proto_w);
    let protos = encoder::make_prototypes(&mut g, e, pw)?;
    m.encoder
        .wq
        .iter()
        .map(|w| {
            let wv = g.constant(w);
            let q = g.matmul(protos, wv)?;
            Ok(g.value(q).clone())
        })
        .collect()
}

struct SampleGraph<'a> {
    g: Graph<'a>,
    loss: Var,
    pred: Var,
    selection: PromptSelection,
    slots: Vec<(Slot, Var)>,
}

/// Builds the per-sample graph; `loss` is the sample MSE scaled by `weight`.
fn sample_graph<'a>(
    m: &Model<'a>,
    queries: &'a [Tensor],
    s: &'a PreparedSample,
    weight: f64,
    trainable: bool,
) -> Result<SampleGraph<'a>> {
    let cfg = m.config;
    let enc = m.encoder;
    let mut g = Graph::new();
    let mut slots = Vec::new();
    let leaf = |g: &mut Graph<'a>, slots: &mut Vec<(Slot, Var)>, t: &'a Tensor, slot: Slot| {
        let v = g.leaf_with(t, trainable);
        if trainable {
            slots.push((slot, v));
        }
        v
    };
    let patch_w = leaf(&mut g, &mut slots, &enc.patch_w, Slot::Encoder("patch_proj.weight".into()));
    let patch_b = leaf(&mut g, &mut slots, &enc.patch_b, Slot::Encoder("patch_proj.bias".into()));
    let (mut wk, mut qs) = (Vec::new(), Vec::new());
    let (prompt_w, prompt_b);
    if cfg.prompt_len > 0 {
        for (h, (k, q)) in enc.wk.iter().zip(queries).enumerate() {
            wk.push(leaf(&mut g, &mut slots, k, Slot::Encoder(format!("attn.{h}.key"))));
            qs.push(leaf(&mut g, &mut slots, q, Slot::Query(h)));
        }
        prompt_w = leaf(&mut g, &mut slots, &enc.prompt_w, Slot::Encoder("prompt_proj.weight".into()));
        prompt_b = leaf(&mut g, &mut slots, &enc.prompt_b, Slot::Encoder("prompt_proj.bias".into()));
    } else {
        prompt_w = g.constant(&enc.prompt_w);
        prompt_b = g.constant(&enc.prompt_b);
    }
    let vars = EncoderVars { patch_w, patch_b, wk, prompt_w, prompt_b, queries: qs };

    let bb = backbone::bind(&mut g, m.backbone, if trainable { cfg.tuning } else { Tuning::Freeze });
    if trainable {
        let names = m.backbone.trainable_names(cfg.tuning);
        for (name, v) in names.into_iter().zip(bb.trainable(cfg.tuning)) {
            slots.push((Slot::Backbone(name), v));
        }
    }
    let hw = leaf(&mut g, &mut slots, &m.head.weight, Slot::Head("head.weight".into()));
    let hb = leaf(&mut g, &mut slots, &m.head.bias, Slot::Head("head.bias".into()));

    let patches = g.constant(&s.patches);
    let out = encoder::encode(&mut g, &vars, patches, cfg.prompt_len)?;
    let tokens = match out.prompts {
        Some(p) => g.concat_rows(&[p, out.tokens])?,
        None => out.tokens,
    };
    let reps = backbone::forward(&mut g, &bb, tokens, m.backbone.heads)?;
    let pred = head::predict(&mut g, reps, hw, hb)?;
    if g.value(pred).shape() != s.target.shape() {
        return Err(Error::Contract(format!(
            "head forecasts {:?}, target has {:?}",
            g.value(pred).shape(),
            s.target.shape()
        )));
    }
    let (mean, std) = s.stats;
    let denorm = g.affine(pred, std + INSTANCE_EPS, mean)?;
    let target = g.constant(&s.target);
    let diff = g.sub(denorm, target)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq)?;
    let loss = g.scale(mse, weight)?;
    Ok(SampleGraph { g, loss, pred: denorm, selection: out.selection, slots })
}

fn add_into(map: &mut BTreeMap<String, Tensor>, name: String, t: Tensor) {
    match map.get_mut(&name) {
        Some(acc) => acc.add_assign(&t),
        None => {
            map.insert(name, t);
        }
    }
}

/// Mean-squared error over the batch and its gradients for every trainable
/// leaf under the configured tuning mode.
pub fn loss_and_grads(m: &Model<'_>, batch: &[PreparedSample], parallel: bool) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("empty training batch".into()));
    }
    let queries = prototype_queries(m)?;
    let weight = 1.0 / batch.len() as f64;
    let per_sample = map_ordered(batch, parallel, |s| -> Result<(f64, Vec<(Slot, Tensor)>)> {
        let sg = sample_graph(m, &queries, s, weight, true)?;
        let mut grads = sg.g.backward(sg.loss)?;
        let loss = sg.g.value(sg.loss).data()[0];
        let out = sg
            .slots
            .into_iter()
            .filter_map(|(slot, v)| grads.take(v).map(|t| (slot, t)))
            .collect();
        Ok((loss, out))
    });

    let mut loss = 0.0;
    let mut grads = ModelGrads::default();
    let mut dq: Vec<Option<Tensor>> = vec![None; queries.len()];
    for r in per_sample {
        let (l, parts) = r?;
        loss += l;
        for (slot, t) in parts {
            match slot {
                Slot::Encoder(n) => add_into(&mut grads.encoder, n, t),
                Slot::Backbone(n) => add_into(&mut grads.backbone, n, t),
                Slot::Head(n) => add_into(&mut grads.head, n, t),
                Slot::Query(h) => match &mut dq[h] {
                    Some(acc) => acc.add_assign(&t),
                    None => dq[h] = Some(t),
                },
            }
        }
    }

    if !queries.is_empty() {
        let mut g = Graph::new();
        let e = g.constant(&m.backbone.embedding);
        let pw = g.param(&m.encoder.proto_w);
        let protos = encoder::make_prototypes(&mut g, e, pw)?;
        let wq: Vec<Var> = m.encoder.wq.iter().map(|w| g.param(w)).collect();
        let qv: Vec<Var> = wq.iter().map(|w| g.matmul(protos, *w)).collect::<std::result::Result<_, _>>()?;
        let qcat = g.concat_cols(&qv)?;
        let seeds: Vec<Tensor> = dq
            .into_iter()
            .zip(&queries)
            .map(|(d, q)| d.unwrap_or_else(|| Tensor::zeros(q.shape())))
            .collect();
        let mut sg = Graph::new();
        let seed_vars: Vec<Var> = seeds.iter().map(|t| sg.constant(t)).collect();
        let seed = sg.concat_cols(&seed_vars)?;
        let mut back = g.backward_from(qcat, sg.value(seed).clone())?;
        if let Some(t) = back.take(pw) {
            grads.encoder.insert("proto_proj.weight".into(), t);
        }
        for (h, w) in wq.into_iter().enumerate() {
            if let Some(t) = back.take(w) {
                grads.encoder.insert(format!("attn.{h}.query"), t);
            }
        }
    }
    if !loss.is_finite() {
        return Err(crate::numerics::NumericsError::NonFinite { op: "loss" }.into());
    }
    Ok(StepOutput { loss, grads })
}

/// Forward-only batch loss; the objective differentiated by [`loss_and_grads`].
pub fn batch_loss(m: &Model<'_>, batch: &[PreparedSample], parallel: bool) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("empty batch".into()));
    }
    let queries = prototype_queries(m)?;
    let weight = 1.0 / batch.len() as f64;
    let losses = map_ordered(batch, parallel, |s| -> Result<f64> {
        let sg = sample_graph(m, &queries, s, weight, false)?;
        Ok(sg.g.value(sg.loss).data()[0])
    });
    losses.into_iter().sum()
}

/// One forecast on the standardized scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub prediction: Vec<f64>,
    pub selection: PromptSelection,
}

pub fn forecast(m: &Model<'_>, samples: &[PreparedSample], parallel: bool) -> Result<Vec<Forecast>> {
    let queries = prototype_queries(m)?;
    map_ordered(samples, parallel, |s| -> Result<Forecast> {
        let sg = sample_graph(m, &queries, s, 1.0, false)?;
        Ok(Forecast { prediction: sg.g.value(sg.pred).data().to_vec(), selection: sg.selection })
    })
    .into_iter()
    .collect()
}

/// Names of every trainable leaf, grouped as in [`ModelGrads`].
pub fn trainable_names(m: &Model<'_>) -> ModelGrads {
    let zeros = |group: &dyn ParamGroup, keep: &dyn Fn(&str) -> bool| {
        group
            .named()
            .into_iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, t)| (n, Tensor::zeros(t.shape())))
            .collect()
    };
    let bb_names = m.backbone.trainable_names(m.config.tuning);
    let prompted = m.config.prompt_len > 0;
    ModelGrads {
        encoder: zeros(m.encoder, &|n| prompted || n.starts_with("patch_proj")),
        backbone: zeros(m.backbone, &|n| bb_names.iter().any(|b| b == n)),
        head: zeros(m.head, &|_| true),
    }
}
