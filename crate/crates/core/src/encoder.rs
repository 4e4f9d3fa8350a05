//! The globally shared front end: patch-to-token alignment and prompt
//! adaption over text prototypes.
//!
//! Prototypes `E' = Wpᵀ E` are learned combinations of the frozen embedding
//! table. Each attention head scores prototypes against patch tokens with a
//! value-free attention whose softmax runs over the prototype axis, sums the
//! scores per prototype, and keeps the query rows of the `M` best prototypes.
//! Heads are concatenated feature-wise and projected to `M` prompt tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::params::{uniform_weight, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_model: usize,
    pub heads: usize,
    pub patch_len: usize,
    pub vocab: usize,
    pub prototypes: usize,
    pub prompt_len: usize,
}

impl EncoderDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.prototypes >= self.vocab {
            return Err(Error::config(format!(
                "prototypes {} must be fewer than vocabulary {}",
                self.prototypes, self.vocab
            )));
        }
        if self.prompt_len > self.prototypes {
            return Err(Error::config(format!(
                "prompt length {} exceeds prototypes {}",
                self.prompt_len, self.prototypes
            )));
        }
        if self.patch_len == 0 || self.d_model == 0 || self.prototypes == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

/// Trainable parameters exchanged with the server every round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `P × D`
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// `V × V'`
    pub proto_w: Tensor,
    /// One `D × d` query projection per head.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    /// `D × D`
    pub prompt_w: Tensor,
    pub prompt_b: Tensor,
}

impl EncoderParams {
    pub fn init(dims: &EncoderDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let (d, hd) = (dims.d_model, dims.head_dim());
        let patch_w = uniform_weight(rng, dims.patch_len, d);
        let proto_w = uniform_weight(rng, dims.vocab, dims.prototypes);
        let wq = (0..dims.heads).map(|_| uniform_weight(rng, d, hd)).collect();
        let wk = (0..dims.heads).map(|_| uniform_weight(rng, d, hd)).collect();
        let prompt_w = uniform_weight(rng, d, d);
        Ok(Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            proto_w,
            wq,
            wk,
            prompt_w,
            prompt_b: Tensor::zeros(&[d]),
        })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_model(&self) -> usize {
        self.patch_w.cols()
    }
}

impl ParamGroup for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("patch_proj.weight".to_string(), &self.patch_w),
            ("patch_proj.bias".to_string(), &self.patch_b),
            ("proto_proj.weight".to_string(), &self.proto_w),
        ];
        v.extend(self.wq.iter().enumerate().map(|(h, t)| (format!("attn.{h}.query"), t)));
        v.extend(self.wk.iter().enumerate().map(|(h, t)| (format!("attn.{h}.key"), t)));
        v.push(("prompt_proj.weight".to_string(), &self.prompt_w));
        v.push(("prompt_proj.bias".to_string(), &self.prompt_b));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            ("patch_proj.weight".to_string(), &mut self.patch_w),
            ("patch_proj.bias".to_string(), &mut self.patch_b),
            ("proto_proj.weight".to_string(), &mut self.proto_w),
        ];
        v.extend(self.wq.iter_mut().enumerate().map(|(h, t)| (format!("attn.{h}.query"), t)));
        v.extend(self.wk.iter_mut().enumerate().map(|(h, t)| (format!("attn.{h}.key"), t)));
        v.push(("prompt_proj.weight".to_string(), &mut self.prompt_w));
        v.push(("prompt_proj.bias".to_string(), &mut self.prompt_b));
        v
    }
}

/// Diagnostics for one attention head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    /// `V' × B`, each column sums to 1.
    pub scores: Tensor,
    /// Row sums of `scores`.
    pub totals: Vec<f64>,
    /// Selected prototypes, best first.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub heads: Vec<HeadSelection>,
}

impl PromptSelection {
    /// Union of selected prototype indices over all heads.
    pub fn index_set(&self) -> std::collections::BTreeSet<usize> {
        self.heads.iter().flat_map(|h| h.indices.iter().copied()).collect()
    }
}

/// Patch tokens `patches · W + b`.
pub fn align(g: &mut Graph<'_>, patches: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let t = g.matmul(patches, w)?;
    g.add_row(t, b)
}

/// Text prototypes `E' = Wpᵀ · E`.
pub fn make_prototypes(g: &mut Graph<'_>, embedding: Var, proto_w: Var) -> Result<Var> {
    let (v, vp) = (g.value(proto_w).rows(), g.value(proto_w).cols());
    if vp >= v {
        return Err(Error::config(format!("prototypes {vp} must be fewer than vocabulary {v}")));
    }
    let wt = g.transpose(proto_w)?;
    Ok(g.matmul(wt, embedding)?)
}

/// Attention scores `softmax_prototypes(Q_h K_hᵀ / √d)`, shape `V' × B`.
pub fn score(g: &mut Graph<'_>, queries: Var, tokens: Var, wk: Var) -> Result<Var, NumericsError> {
    let d = g.value(wk).cols() as f64;
    let keys = g.matmul(tokens, wk)?;
    let kt = g.transpose(keys)?;
    let logits = g.matmul(queries, kt)?;
    let scaled = g.scale(logits, 1.0 / d.sqrt())?;
    g.softmax(scaled, 0)
}

/// Per-prototype totals over all patch tokens.
pub fn summarize(scores: &Tensor) -> Vec<f64> {
    (0..scores.rows()).map(|v| scores.row(v).iter().sum()).collect()
}

/// Indices of the `m` largest totals, best first; ties go to the lower index.
pub fn top_m(totals: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > totals.len() {
        return Err(Error::config(format!("cannot select {m} of {} prototypes", totals.len())));
    }
    let mut idx: Vec<usize> = (0..totals.len()).collect();
    let by_rank = |a: &usize, b: &usize| totals[*b].total_cmp(&totals[*a]).then(a.cmp(b));
    if m < idx.len() && m > 0 {
        idx.select_nth_unstable_by(m - 1, by_rank);
    }
    idx.truncate(m);
    idx.sort_by(by_rank);
    Ok(idx)
}

/// `Z_h = Q_h[TopM(Ô_h)]`; the indices are constants of the graph.
pub fn select_top_m(g: &mut Graph<'_>, queries: Var, scores: &Tensor, m: usize) -> Result<(Var, HeadSelection)> {
    let totals = summarize(scores);
    let indices = top_m(&totals, m)?;
    let z = g.gather_rows(queries, &indices)?;
    Ok((z, HeadSelection { scores: scores.clone(), totals, indices }))
}

/// Concatenates head selections feature-wise and projects them to prompt tokens.
pub fn build_prompts(g: &mut Graph<'_>, per_head: &[Var], w: Var, b: Var) -> Result<Var> {
    let d = g.value(w).rows();
    let width: usize = per_head.iter().map(|z| g.value(*z).cols()).sum();
    if width != d {
        return Err(Error::Contract(format!("heads concatenate to {width} features, projection expects {d}")));
    }
    let z = g.concat_cols(per_head)?;
    let p = g.matmul(z, w)?;
    Ok(g.add_row(p, b)?)
}

/// Graph handles of the encoder parameters used per sample. `queries` are
/// either computed in the same graph or supplied as leaves.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub wk: Vec<Var>,
    pub prompt_w: Var,
    pub prompt_b: Var,
    pub queries: Vec<Var>,
}

/// Output of [`encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `M × D`, absent when `M = 0`.
    pub prompts: Option<Var>,
    /// `B × D`
    pub tokens: Var,
    pub selection: PromptSelection,
}

/// Modality alignment followed by prompt adaption for one patched sample.
pub fn encode(g: &mut Graph<'_>, vars: &EncoderVars, patches: Var, prompt_len: usize) -> Result<Encoded> {
    let tokens = align(g, patches, vars.patch_w, vars.patch_b)?;
    if prompt_len == 0 {
        return Ok(Encoded { prompts: None, tokens, selection: PromptSelection::default() });
    }
    let mut zs = Vec::with_capacity(vars.wk.len());
    let mut selection = PromptSelection::default();
    for (q, wk) in vars.queries.iter().zip(&vars.wk) {
        let o = score(g, *q, tokens, *wk)?;
        let scores = g.value(o).clone();
        let (z, sel) = select_top_m(g, *q, &scores, prompt_len)?;
        zs.push(z);
        selection.heads.push(sel);
    }
    let prompts = build_prompts(g, &zs, vars.prompt_w, vars.prompt_b)?;
    Ok(Encoded { prompts: Some(prompts), tokens, selection })
}
