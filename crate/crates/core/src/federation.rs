//! Round orchestration: distribute the global encoder, train every client
//! locally, average the uploads, select the best round on validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, Tuning};
use crate::data::{DomainDataset, Split};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::exec::map_ordered_mut;
use crate::head::HeadParams;
use crate::model::{self, DomainShape, Model, ModelConfig, PreparedSample};
use crate::numerics::{NumericsError, Tensor};
use crate::optim::Adam;
use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// No prompt tokens; the backbone sees patch tokens only.
    NoPrompt,
    /// One head averaged across clients like the encoder.
    SharedHead,
    /// Clients never exchange parameters.
    NoAgg,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoPrompt => "no-prompt",
            Ablation::SharedHead => "shared-head",
            Ablation::NoAgg => "no-agg",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-prompt" => Ok(Ablation::NoPrompt),
            "shared-head" => Ok(Ablation::SharedHead),
            "no-agg" => Ok(Ablation::NoAgg),
            other => Err(Error::config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub parallel: bool,
}

impl TrainConfig {
    /// The model configuration after applying the ablation.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model;
        if self.ablation == Ablation::NoPrompt {
            m.prompt_len = 0;
        }
        m
    }
}

/// `b_i = max(1, ⌊total · w_i / Σw⌋)` where `total` sums every client's batch count.
pub fn compute_quotas(batches: &[usize], weights: &[usize]) -> Result<Vec<usize>> {
    if batches.len() != weights.len() {
        return Err(Error::config("one oversampling weight per client is required"));
    }
    if weights.contains(&0) {
        return Err(Error::config("oversampling weights must be positive"));
    }
    if !batches.iter().any(|b| *b > 0) {
        return Err(Error::config("no client has a training batch"));
    }
    let total: usize = batches.iter().sum();
    let ratios = sampling_ratios(weights);
    Ok(ratios.iter().map(|r| ((total as f64 * r).floor() as usize).max(1)).collect())
}

pub fn sampling_ratios(weights: &[usize]) -> Vec<f64> {
    let sum: usize = weights.iter().sum();
    weights.iter().map(|w| *w as f64 / sum as f64).collect()
}

/// Elementwise mean, accumulated in slice order.
pub fn aggregate<P: ParamGroup + Clone>(uploads: &[P]) -> Result<P> {
    let Some(first) = uploads.first() else {
        return Err(Error::Protocol("nothing to aggregate".into()));
    };
    let layout: Vec<(String, Vec<usize>)> = first.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for u in &uploads[1..] {
        let other: Vec<(String, Vec<usize>)> = u.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if other != layout {
            return Err(Error::Protocol("uploads differ in structure".into()));
        }
    }
    let mut acc = first.clone();
    for u in &uploads[1..] {
        for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(u.named()) {
            a.add_assign(b);
        }
    }
    let inv = 1.0 / uploads.len() as f64;
    for (_, a) in acc.named_mut() {
        a.scale_assign(inv);
    }
    Ok(acc)
}

/// One client: its data, personalized state and optimizer moments.
#[derive(Clone, Debug)]
pub struct Client {
    pub domain_id: usize,
    pub name: String,
    pub shape: DomainShape,
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub oversampling: usize,
    /// Training samples grouped by window start.
    train: Vec<Vec<PreparedSample>>,
    val: Vec<PreparedSample>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    adam_encoder: Adam,
    adam_backbone: Adam,
    adam_head: Adam,
    last_upload: Option<EncoderParams>,
    last_head_upload: Option<HeadParams>,
}

impl Client {
    pub fn new(
        ds: &DomainDataset,
        cfg: &ModelConfig,
        encoder: EncoderParams,
        backbone: BackboneParams,
        head_rng: &mut ChaCha8Rng,
        shuffle_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let meta = &ds.meta;
        let shape = DomainShape { lookback: meta.lookback, horizon: meta.horizon, stride: meta.stride };
        let rows = cfg.rows(&shape)?;
        let head = HeadParams::init(meta.domain_id, rows, cfg.d_model, meta.horizon, head_rng);
        let train = model::prepare_split(ds, Split::Train, cfg.patch_len)?;
        let val = model::prepare_split(ds, Split::Val, cfg.patch_len)?.into_iter().flatten().collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(shuffle_rng);
        Ok(Self {
            domain_id: meta.domain_id,
            name: meta.name.clone(),
            shape,
            encoder,
            backbone,
            head,
            oversampling: meta.oversampling,
            train,
            val,
            order,
            batch_size: meta.batch_size,
            cursor: 0,
            adam_encoder: Adam::new(),
            adam_backbone: Adam::new(),
            adam_head: Adam::new(),
            last_upload: None,
            last_head_upload: None,
        })
    }

    /// Training batches per pass over the data.
    pub fn total_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn validation_samples(&self) -> &[PreparedSample] {
        &self.val
    }

    pub fn model<'a>(&'a self, cfg: &'a ModelConfig) -> Model<'a> {
        Model { config: cfg, encoder: &self.encoder, backbone: &self.backbone, head: &self.head }
    }

    /// The next batch in the persistent rotation.
    pub fn next_batch(&mut self) -> Vec<PreparedSample> {
        let k = self.cursor % self.total_batches();
        self.cursor = (k + 1) % self.total_batches();
        let end = ((k + 1) * self.batch_size).min(self.order.len());
        self.order[k * self.batch_size..end]
            .iter()
            .flat_map(|p| self.train[*p].iter().cloned())
            .collect()
    }

    /// One optimizer step on the next batch; returns the batch loss.
    pub fn train_step(&mut self, cfg: &ModelConfig, lr: f64, parallel: bool) -> Result<f64> {
        let batch = self.next_batch();
        let out = model::loss_and_grads(&self.model(cfg), &batch, parallel)?;
        self.adam_encoder.step(&mut self.encoder, &out.grads.encoder, lr)?;
        self.adam_backbone.step(&mut self.backbone, &out.grads.backbone, lr)?;
        self.adam_head.step(&mut self.head, &out.grads.head, lr)?;
        Ok(out.loss)
    }

    /// Pooled MSE over the full validation split.
    pub fn validation_loss(&self, cfg: &ModelConfig, parallel: bool) -> Result<f64> {
        model::batch_loss(&self.model(cfg), &self.val, parallel)
    }

    /// Installs the distributed encoder. Encoder moments restart unless it is
    /// bit-identical to this client's previous upload.
    pub fn load_global(&mut self, global: &EncoderParams) {
        if self.last_upload.as_ref() != Some(global) {
            self.adam_encoder.reset();
        }
        self.encoder = global.clone();
    }

    pub fn load_global_head(&mut self, head: &HeadParams) {
        if self.last_head_upload.as_ref() != Some(head) {
            self.adam_head.reset();
        }
        self.head = HeadParams { domain_id: self.domain_id, ..head.clone() };
    }

    /// Runs `epochs` passes of `quota` batches; returns the mean batch loss.
    pub fn local_execute(
        &mut self,
        cfg: &ModelConfig,
        quota: usize,
        epochs: usize,
        lr: f64,
        parallel: bool,
        round: usize,
    ) -> Result<f64> {
        if quota == 0 {
            return Err(Error::Protocol(format!("client {}: batch quota must be at least 1", self.name)));
        }
        let mut total = 0.0;
        let mut batch = 0;
        for _ in 0..epochs {
            for _ in 0..quota {
                let loss = self.train_step(cfg, lr, parallel).map_err(|e| match e {
                    Error::Numerics(NumericsError::NonFinite { .. }) => {
                        Error::NonFiniteLoss { domain: self.name.clone(), round, batch }
                    }
                    other => other,
                })?;
                total += loss;
                batch += 1;
            }
        }
        self.last_upload = Some(self.encoder.clone());
        self.last_head_upload = Some(self.head.clone());
        Ok(if batch == 0 { 0.0 } else { total / batch as f64 })
    }
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub avg_val_loss: f64,
    pub comm_bytes: usize,
}

pub fn write_round_log(path: impl AsRef<Path>, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_round_log(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Everything a client uploads in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPayload {
    pub round: usize,
    pub client: String,
    /// Tag-qualified parameter names.
    pub params: BTreeMap<String, Tensor>,
}

impl RoundPayload {
    pub fn bytes(&self) -> usize {
        self.params.values().map(|t| t.len() * std::mem::size_of::<f64>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientSnapshot {
    pub name: String,
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

/// Model state at one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// `None` for the untrained initial state.
    pub round: Option<usize>,
    pub avg_val_loss: Option<f64>,
    pub global: EncoderParams,
    pub clients: Vec<ClientSnapshot>,
}

#[derive(Clone, Debug)]
pub struct Federation {
    pub config: TrainConfig,
    /// The model configuration after the ablation is applied.
    pub model: ModelConfig,
    pub clients: Vec<Client>,
    pub global: EncoderParams,
    pub global_head: Option<HeadParams>,
    pub quotas: Vec<usize>,
    pub backbone_seed: u64,
    pub log: Vec<RoundRecord>,
    round: usize,
    best: Snapshot,
}

impl Federation {
    /// Seeds every parameter group and batch order from `config.seed`.
    pub fn new(config: TrainConfig, datasets: &[DomainDataset]) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::config("at least one domain is required"));
        }
        if config.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        let model = config.effective_model();
        model.validate()?;
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone_seed = master.next_u64();
        let backbone = BackboneParams::init(&model.backbone_dims(), backbone_seed)?;
        let mut enc_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let global = EncoderParams::init(&model.encoder_dims(), &mut enc_rng)?;
        let mut clients = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let mut head_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            clients.push(Client::new(ds, &model, global.clone(), backbone.clone(), &mut head_rng, &mut shuffle_rng)?);
        }
        let global_head = if config.ablation == Ablation::SharedHead {
            let first = clients[0].head.clone();
            if let Some(c) = clients.iter().find(|c| !c.head.same_shape(&first)) {
                return Err(Error::config(format!(
                    "a shared head needs identical head shapes; {} has {:?}, {} has {:?}",
                    clients[0].name,
                    first.weight.shape(),
                    c.name,
                    c.head.weight.shape()
                )));
            }
            for c in &mut clients {
                c.head = HeadParams { domain_id: c.domain_id, ..first.clone() };
            }
            Some(first)
        } else {
            None
        };
        let batches: Vec<usize> = clients.iter().map(Client::total_batches).collect();
        let weights: Vec<usize> = clients.iter().map(|c| c.oversampling).collect();
        let quotas = compute_quotas(&batches, &weights)?;
        let global_copy = global.clone();
        let mut fed = Self {
            config,
            model,
            clients,
            global,
            global_head,
            quotas,
            backbone_seed,
            log: Vec::new(),
            round: 0,
            best: Snapshot { round: None, avg_val_loss: None, global: global_copy, clients: Vec::new() },
        };
        fed.best = fed.snapshot(None, None);
        Ok(fed)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn best(&self) -> &Snapshot {
        &self.best
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    fn snapshot(&self, round: Option<usize>, avg: Option<f64>) -> Snapshot {
        Snapshot {
            round,
            avg_val_loss: avg,
            global: self.global.clone(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientSnapshot {
                    name: c.name.clone(),
                    encoder: c.encoder.clone(),
                    backbone: c.backbone.clone(),
                    head: c.head.clone(),
                })
                .collect(),
        }
    }

    /// What client `i` uploads after local training this round.
    pub fn payload(&self, i: usize) -> RoundPayload {
        let c = &self.clients[i];
        let mut params = BTreeMap::new();
        if self.config.ablation != Ablation::NoAgg {
            for (n, t) in c.encoder.named() {
                params.insert(format!("global-encoder/{n}"), t.clone());
            }
            if self.config.ablation == Ablation::SharedHead {
                for (n, t) in c.head.named() {
                    params.insert(format!("shared-head/{n}"), t.clone());
                }
            }
        }
        RoundPayload { round: self.round, client: c.name.clone(), params }
    }

    /// Distribute, train locally, aggregate, validate.
    pub fn step_round(&mut self) -> Result<Vec<RoundRecord>> {
        let round = self.round;
        let (cfg, lr, epochs, parallel) = (self.model, self.config.lr, self.config.local_epochs, self.config.parallel);
        let aggregate_enabled = self.config.ablation != Ablation::NoAgg;
        if aggregate_enabled {
            let global = self.global.clone();
            let head = self.global_head.clone();
            for c in &mut self.clients {
                c.load_global(&global);
                if let Some(h) = &head {
                    c.load_global_head(h);
                }
            }
        }
        let quotas = self.quotas.clone();
        let train_losses: Vec<Result<f64>> = map_ordered_mut(&mut self.clients, parallel, |i, c| {
            c.local_execute(&cfg, quotas[i], epochs, lr, parallel, round)
        });
        let train_losses = train_losses.into_iter().collect::<Result<Vec<f64>>>()?;
        let comm: Vec<usize> = (0..self.clients.len()).map(|i| self.payload(i).bytes()).collect();

        if aggregate_enabled {
            let uploads: Vec<EncoderParams> = self.clients.iter().map(|c| c.encoder.clone()).collect();
            self.global = aggregate(&uploads)?;
            if self.global_head.is_some() {
                let heads: Vec<HeadParams> = self.clients.iter().map(|c| c.head.clone()).collect();
                let mut h = aggregate(&heads)?;
                h.domain_id = 0;
                for c in &mut self.clients {
                    c.head = HeadParams { domain_id: c.domain_id, ..h.clone() };
                }
                self.global_head = Some(h);
            }
            for c in &mut self.clients {
                c.encoder = self.global.clone();
            }
        }

        let val: Vec<Result<f64>> = map_ordered_mut(&mut self.clients, parallel, |_, c| c.validation_loss(&cfg, parallel));
        let val = val.into_iter().collect::<Result<Vec<f64>>>()?;
        let avg = val.iter().sum::<f64>() / val.len() as f64;
        let records: Vec<RoundRecord> = self
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| RoundRecord {
                round,
                client: c.name.clone(),
                train_loss: train_losses[i],
                val_loss: val[i],
                avg_val_loss: avg,
                comm_bytes: comm[i],
            })
            .collect();
        log::info!("round {round}: average validation loss {avg:.6}");
        if self.best.avg_val_loss.is_none_or(|b| avg < b) {
            self.best = self.snapshot(Some(round), Some(avg));
        }
        self.log.extend(records.iter().cloned());
        self.round += 1;
        Ok(records)
    }

    /// Runs the remaining rounds.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step_round()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, snapshot: &Snapshot) -> Checkpoint {
        let mut entries = Vec::new();
        let named = |g: &dyn ParamGroup| g.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        if self.config.ablation == Ablation::NoAgg {
            for c in &snapshot.clients {
                entries.push(CheckpointEntry { tag: format!("encoder:{}", c.name), params: named(&c.encoder) });
            }
        } else {
            entries.push(CheckpointEntry { tag: GLOBAL_ENCODER.into(), params: named(&snapshot.global) });
        }
        if self.model.tuning == Tuning::Freeze {
            if let Some(c) = snapshot.clients.first() {
                entries.push(CheckpointEntry { tag: "backbone".into(), params: named(&c.backbone) });
            }
        } else {
            for c in &snapshot.clients {
                entries.push(CheckpointEntry { tag: format!("backbone:{}", c.name), params: named(&c.backbone) });
            }
        }
        for c in &snapshot.clients {
            entries.push(CheckpointEntry { tag: format!("head:{}", c.name), params: named(&c.head) });
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.config.seed,
            backbone_seed: self.backbone_seed,
            round: snapshot.round,
            avg_val_loss: snapshot.avg_val_loss,
            config: self.config,
            domains: snapshot.clients.iter().map(|c| c.name.clone()).collect(),
            entries,
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const GLOBAL_ENCODER: &str = "global-encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub tag: String,
    pub params: BTreeMap<String, Tensor>,
}

/// Versioned JSON container for all parameter groups of one snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub backbone_seed: u64,
    pub round: Option<usize>,
    pub avg_val_loss: Option<f64>,
    pub config: TrainConfig,
    pub domains: Vec<String>,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let header: serde_json::Value = serde_json::from_str(&text)?;
        let found = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version { found, expected: CHECKPOINT_VERSION });
        }
        Ok(serde_json::from_value(header)?)
    }

    pub fn entry(&self, tag: &str) -> Result<&CheckpointEntry> {
        self.entries
            .iter()
            .find(|e| e.tag == tag)
            .ok_or_else(|| Error::Schema(format!("checkpoint has no `{tag}` entry")))
    }

    /// Copies a tagged entry into a parameter group of matching layout.
    pub fn restore(&self, tag: &str, group: &mut dyn ParamGroup) -> Result<()> {
        let entry = self.entry(tag)?;
        let mut seen = 0;
        for (name, t) in group.named_mut() {
            let src = entry
                .params
                .get(&name)
                .ok_or_else(|| Error::Schema(format!("`{tag}` lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Schema(format!(
                    "`{tag}` {name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
            seen += 1;
        }
        if seen != entry.params.len() {
            return Err(Error::Schema(format!("`{tag}` has parameters this model does not")));
        }
        Ok(())
    }

    /// Rebuilds the per-domain parameter groups of every stored client.
    pub fn client_states(&self) -> Result<Vec<ClientSnapshot>> {
        let model = self.config.effective_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::new();
        for (domain_id, name) in self.domains.iter().enumerate() {
            let mut encoder = EncoderParams::init(&model.encoder_dims(), &mut rng)?;
            let enc_tag = if self.config.ablation == Ablation::NoAgg { format!("encoder:{name}") } else { GLOBAL_ENCODER.into() };
            self.restore(&enc_tag, &mut encoder)?;
            let mut backbone = BackboneParams::init(&model.backbone_dims(), self.backbone_seed)?;
            let bb_tag = if model.tuning == Tuning::Freeze { "backbone".to_string() } else { format!("backbone:{name}") };
            self.restore(&bb_tag, &mut backbone)?;
            let head_entry = self.entry(&format!("head:{name}"))?;
            let w = head_entry
                .params
                .get("head.weight")
                .ok_or_else(|| Error::Schema(format!("head:{name} lacks head.weight")))?;
            let mut head = HeadParams { domain_id, weight: Tensor::zeros(w.shape()), bias: Tensor::zeros(&[w.cols()]) };
            self.restore(&format!("head:{name}"), &mut head)?;
            out.push(ClientSnapshot { name: name.clone(), encoder, backbone, head });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainMeta, SplitSizes};
    use crate::params::max_divergence;

    #[test]
    fn quota_examples() {
        let r = sampling_ratios(&[13, 1, 1, 1, 1, 1, 1, 1]);
        assert!((r[0] - 0.65).abs() <= 1e-12);
        assert!(r[1..].iter().all(|x| (x - 0.05).abs() <= 1e-12));
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(compute_quotas(&[17], &[3]).unwrap(), vec![17]);
        assert_eq!(compute_quotas(&[10, 30], &[1, 1]).unwrap(), vec![20, 20]);
        // total 10: 10·0.65 = 6.5 → 6; 10·0.05 = 0.5 → 0 → 1
        assert_eq!(compute_quotas(&[3, 1, 1, 1, 1, 1, 1, 1], &[13, 1, 1, 1, 1, 1, 1, 1]).unwrap(), vec![6, 1, 1, 1, 1, 1, 1, 1]);
        assert!(compute_quotas(&[0, 0], &[1, 1]).is_err());
        assert!(compute_quotas(&[1, 1], &[0, 1]).is_err());
    }

    #[derive(Clone, PartialEq, Debug)]
    struct Scalars(Tensor);

    impl ParamGroup for Scalars {
        fn named(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn aggregate_examples() {
        let p = Scalars(Tensor::vector(vec![1.5, -2.0]));
        let neg = Scalars(p.0.map(|v| -v));
        assert_eq!(aggregate(&[p.clone(), neg]).unwrap().0.data(), &[0.0, 0.0]);
        assert_eq!(aggregate(std::slice::from_ref(&p)).unwrap(), p);
        let s = |v: f64| Scalars(Tensor::vector(vec![v]));
        assert_eq!(aggregate(&[s(1.0), s(2.0), s(6.0)]).unwrap().0.data(), &[3.0]);
        let wide = Scalars(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(aggregate(&[p, wide]), Err(Error::Protocol(_))));
        assert!(aggregate::<Scalars>(&[]).is_err());
    }

    pub(crate) fn tiny_dataset(id: usize, name: &str, horizon: usize, phase: f64) -> DomainDataset {
        let n = 80;
        let series = vec![(0..n).map(|t| (t as f64 * 0.4 + phase).sin()).collect()];
        let meta = DomainMeta {
            domain_id: id,
            name: name.into(),
            channels: 1,
            splits: SplitSizes { train: 50, val: 15, test: 15 },
            lookback: 8,
            horizon,
            stride: 4,
            batch_size: 4,
            oversampling: 1,
        };
        crate::data::standardize(DomainDataset::new(meta, series).unwrap())
    }

    pub(crate) fn tiny_config(rounds: usize, ablation: Ablation) -> TrainConfig {
        TrainConfig {
            seed: 5,
            rounds,
            local_epochs: 1,
            lr: 1e-3,
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                patch_len: 4,
                vocab: 12,
                prototypes: 6,
                prompt_len: 2,
                max_len: 8,
                depth: 1,
                tuning: Tuning::Freeze,
            },
            ablation,
            parallel: false,
        }
    }

    #[test]
    fn rotation_visits_every_position() {
        let ds = tiny_dataset(0, "a", 2, 0.0);
        let mut fed = Federation::new(tiny_config(0, Ablation::None), &[ds]).unwrap();
        let c = &mut fed.clients[0];
        let n = c.order.len();
        let mut seen = vec![0; n];
        for _ in 0..c.total_batches() {
            let k = c.cursor;
            let end = ((k + 1) * c.batch_size).min(n);
            for p in &c.order[k * c.batch_size..end] {
                seen[*p] += 1;
            }
            c.next_batch();
        }
        assert!(seen.iter().all(|s| *s == 1));
        assert_eq!(c.cursor, 0);
    }

    #[test]
    fn zero_rounds_returns_initial_state() {
        let ds = tiny_dataset(0, "a", 2, 0.0);
        let mut fed = Federation::new(tiny_config(0, Ablation::None), &[ds]).unwrap();
        let init = fed.best().clone();
        fed.run().unwrap();
        assert!(fed.log.is_empty());
        assert_eq!(fed.best(), &init);
        assert_eq!(init.round, None);
    }

    #[test]
    fn best_round_is_log_argmin_and_payload_has_no_head() {
        let sets = [tiny_dataset(0, "a", 2, 0.0), tiny_dataset(1, "b", 3, 1.0)];
        let mut fed = Federation::new(tiny_config(4, Ablation::None), &sets).unwrap();
        fed.run().unwrap();
        let rounds: Vec<(usize, f64)> = fed.log.iter().step_by(2).map(|r| (r.round, r.avg_val_loss)).collect();
        let best = rounds.iter().fold((0, f64::INFINITY), |b, r| if r.1 < b.1 { *r } else { b });
        assert_eq!(fed.best().round, Some(best.0));
        let json = serde_json::to_string(&fed.payload(0)).unwrap();
        assert!(!json.contains("head"));
        assert_eq!(fed.payload(0).bytes(), fed.global.param_count() * 8);
        assert!(fed.log.iter().all(|r| r.comm_bytes == fed.global.param_count() * 8));
        for c in &fed.clients {
            assert_eq!(c.encoder, fed.global);
        }
    }

    #[test]
    fn shared_head_requires_equal_shapes() {
        let sets = [tiny_dataset(0, "a", 2, 0.0), tiny_dataset(1, "b", 3, 1.0)];
        assert!(matches!(Federation::new(tiny_config(1, Ablation::SharedHead), &sets), Err(Error::Config(_))));
        let sets = [tiny_dataset(0, "a", 2, 0.0), tiny_dataset(1, "b", 2, 1.0)];
        let mut fed = Federation::new(tiny_config(2, Ablation::SharedHead), &sets).unwrap();
        fed.run().unwrap();
        assert_eq!(fed.clients[0].head.weight, fed.clients[1].head.weight);
    }

    #[test]
    fn isolated_clients_diverge_and_report_no_traffic() {
        let sets = [tiny_dataset(0, "a", 2, 0.0), tiny_dataset(1, "b", 2, 1.0)];
        let mut fed = Federation::new(tiny_config(2, Ablation::NoAgg), &sets).unwrap();
        fed.run().unwrap();
        assert!(fed.log.iter().all(|r| r.comm_bytes == 0));
        assert!(max_divergence(&fed.clients[0].encoder, &fed.clients[1].encoder) > 0.0);
        assert!(fed.payload(0).params.is_empty());
    }

    #[test]
    fn checkpoint_round_trips() {
        let sets = [tiny_dataset(0, "a", 2, 0.0), tiny_dataset(1, "b", 3, 1.0)];
        let mut cfg = tiny_config(2, Ablation::None);
        cfg.model.tuning = Tuning::Fpt;
        let mut fed = Federation::new(cfg, &sets).unwrap();
        fed.run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.json");
        let ck = fed.checkpoint(fed.best());
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let states = back.client_states().unwrap();
        assert_eq!(states, fed.best().clients);
        let tags: Vec<&str> = ck.entries.iter().map(|e| e.tag.as_str()).collect();
        assert_eq!(tags, ["global-encoder", "backbone:a", "backbone:b", "head:a", "head:b"]);

        let mut raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["version"] = 99.into();
        std::fs::write(&path, raw.to_string()).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn parallel_and_sequential_runs_match() {
        let sets = [tiny_dataset(0, "a", 2, 0.0), tiny_dataset(1, "b", 3, 1.0)];
        let mut a = Federation::new(tiny_config(3, Ablation::None), &sets).unwrap();
        let mut cfg = tiny_config(3, Ablation::None);
        cfg.parallel = true;
        let mut b = Federation::new(cfg, &sets).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.global, b.global);
    }
}
