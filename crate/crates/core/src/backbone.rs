//! Seeded transformer stand-in for the pretrained language model.
//!
//! Blocks are pre-norm with full (non-causal) multi-head self-attention and a
//! GELU feed-forward layer. There is no final normalization, so the
//! normalization groups are exactly two per block.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::params::{normal_matrix, uniform_weight, ParamGroup};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tuning {
    #[default]
    Freeze,
    Fpt,
    Full,
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tuning::Freeze => "freeze",
            Tuning::Fpt => "fpt",
            Tuning::Full => "full",
        })
    }
}

impl FromStr for Tuning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(Tuning::Freeze),
            "fpt" => Ok(Tuning::Fpt),
            "full" => Ok(Tuning::Full),
            other => Err(Error::config(format!("unknown tuning mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `D × 4D`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `4D × D`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: uniform_weight(rng, d, d),
            bq: Tensor::zeros(&[d]),
            wk: uniform_weight(rng, d, d),
            bk: Tensor::zeros(&[d]),
            wv: uniform_weight(rng, d, d),
            bv: Tensor::zeros(&[d]),
            wo: uniform_weight(rng, d, d),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: uniform_weight(rng, d, 4 * d),
            b1: Tensor::zeros(&[4 * d]),
            w2: uniform_weight(rng, 4 * d, d),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// `(suffix, tensor, is_norm)` in a fixed order.
    fn fields(&self) -> [(&'static str, &Tensor, bool); 16] {
        [
            ("ln1.gain", &self.ln1_gain, true),
            ("ln1.bias", &self.ln1_bias, true),
            ("attn.query.weight", &self.wq, false),
            ("attn.query.bias", &self.bq, false),
            ("attn.key.weight", &self.wk, false),
            ("attn.key.bias", &self.bk, false),
            ("attn.value.weight", &self.wv, false),
            ("attn.value.bias", &self.bv, false),
            ("attn.out.weight", &self.wo, false),
            ("attn.out.bias", &self.bo, false),
            ("ln2.gain", &self.ln2_gain, true),
            ("ln2.bias", &self.ln2_bias, true),
            ("ffn.up.weight", &self.w1, false),
            ("ffn.up.bias", &self.b1, false),
            ("ffn.down.weight", &self.w2, false),
            ("ffn.down.bias", &self.b2, false),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.query.weight", &mut self.wq),
            ("attn.query.bias", &mut self.bq),
            ("attn.key.weight", &mut self.wk),
            ("attn.key.bias", &mut self.bk),
            ("attn.value.weight", &mut self.wv),
            ("attn.value.bias", &mut self.bv),
            ("attn.out.weight", &mut self.wo),
            ("attn.out.bias", &mut self.bo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn.up.weight", &mut self.w1),
            ("ffn.up.bias", &mut self.b1),
            ("ffn.down.weight", &mut self.w2),
            ("ffn.down.bias", &mut self.b2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub heads: usize,
    /// `V × D`, never trainable.
    pub embedding: Tensor,
    /// `max_len × D`
    pub positional: Tensor,
    pub blocks: Vec<Block>,
}

pub const EMBEDDING: &str = "embedding";
pub const POSITIONAL: &str = "positional";

impl BackboneParams {
    /// Deterministic in `seed`; every client derives the same stand-in.
    pub fn init(dims: &BackboneDims, seed: u64) -> Result<Self> {
        if dims.heads == 0 || !dims.d_model.is_multiple_of(dims.heads) {
            return Err(Error::config(format!(
                "d_model {} must be divisible by heads {}",
                dims.d_model, dims.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_model;
        let embedding = normal_matrix(&mut rng, dims.vocab, d, 1.0);
        let positional = normal_matrix(&mut rng, dims.max_len, d, 0.02);
        let blocks = (0..dims.depth).map(|_| Block::init(d, &mut rng)).collect();
        Ok(Self { heads: dims.heads, embedding, positional, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    /// Names of the leaves optimized under `tuning`.
    pub fn trainable_names(&self, tuning: Tuning) -> Vec<String> {
        let mut names = Vec::new();
        if tuning == Tuning::Freeze {
            return names;
        }
        names.push(POSITIONAL.to_string());
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, _, is_norm) in b.fields() {
                if is_norm || tuning == Tuning::Full {
                    names.push(format!("block.{i}.{suffix}"));
                }
            }
        }
        names
    }
}

impl ParamGroup for BackboneParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![(EMBEDDING.to_string(), &self.embedding), (POSITIONAL.to_string(), &self.positional)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.fields().into_iter().map(|(s, t, _)| (format!("block.{i}.{s}"), t)));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            (EMBEDDING.to_string(), &mut self.embedding),
            (POSITIONAL.to_string(), &mut self.positional),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.fields_mut().into_iter().map(|(s, t)| (format!("block.{i}.{s}"), t)));
        }
        v
    }
}

/// Graph handles for one bound backbone, in [`ParamGroup::named`] order
/// without the embedding table.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub positional: Var,
    pub blocks: Vec<[Var; 16]>,
}

impl BackboneVars {
    /// Leaves marked trainable, matching [`BackboneParams::trainable_names`].
    pub fn trainable(&self, tuning: Tuning) -> Vec<Var> {
        let mut out = Vec::new();
        if tuning == Tuning::Freeze {
            return out;
        }
        out.push(self.positional);
        for vars in &self.blocks {
            for (k, v) in vars.iter().enumerate() {
                if tuning == Tuning::Full || matches!(k, 0 | 1 | 10 | 11) {
                    out.push(*v);
                }
            }
        }
        out
    }
}

pub fn bind<'a>(g: &mut Graph<'a>, p: &'a BackboneParams, tuning: Tuning) -> BackboneVars {
    let positional = g.leaf_with(&p.positional, tuning != Tuning::Freeze);
    let blocks = p
        .blocks
        .iter()
        .map(|b| {
            b.fields().map(|(_, t, is_norm)| {
                let trainable = match tuning {
                    Tuning::Freeze => false,
                    Tuning::Fpt => is_norm,
                    Tuning::Full => true,
                };
                g.leaf_with(t, trainable)
            })
        })
        .collect();
    BackboneVars { positional, blocks }
}

fn attention(g: &mut Graph<'_>, x: Var, v: &[Var; 16], heads: usize) -> Result<Var, NumericsError> {
    let d = g.value(x).cols();
    let hd = d / heads;
    let q = g.matmul(x, v[2])?;
    let q = g.add_row(q, v[3])?;
    let k = g.matmul(x, v[4])?;
    let k = g.add_row(k, v[5])?;
    let val = g.matmul(x, v[6])?;
    let val = g.add_row(val, v[7])?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(val, a, b)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, 1.0 / (hd as f64).sqrt())?;
        let weights = g.softmax(logits, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let o = g.concat_cols(&outs)?;
    let o = g.matmul(o, v[8])?;
    g.add_row(o, v[9])
}

fn block(g: &mut Graph<'_>, x: Var, v: &[Var; 16], heads: usize) -> Result<Var, NumericsError> {
    let h = g.layer_norm(x, v[0], v[1], LN_EPS)?;
    let a = attention(g, h, v, heads)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, v[10], v[11], LN_EPS)?;
    let up = g.matmul(h, v[12])?;
    let up = g.add_row(up, v[13])?;
    let act = g.gelu(up)?;
    let down = g.matmul(act, v[14])?;
    let down = g.add_row(down, v[15])?;
    g.add(x, down)
}

/// Final-layer states for `tokens` (`n × D`, `n ≤ max_len`).
pub fn forward(g: &mut Graph<'_>, vars: &BackboneVars, tokens: Var, heads: usize) -> Result<Var> {
    let n = g.value(tokens).rows();
    let max_len = g.value(vars.positional).rows();
    if n > max_len {
        return Err(Error::Contract(format!("sequence of {n} tokens exceeds max_len {max_len}")));
    }
    let rows: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(vars.positional, &rows)?;
    let mut x = g.add(tokens, pos)?;
    for v in &vars.blocks {
        x = block(g, x, v, heads)?;
    }
    Ok(x)
}
