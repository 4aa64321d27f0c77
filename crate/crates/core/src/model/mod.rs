//! Pre-LN transformers with hookable module outputs.
//!
//! Two layouts are supported: an encoder-decoder with disjoint input and
//! output embeddings, and a single bidirectional stack used for compiled
//! programs. Every attention and feed-forward module writes its output into
//! the residual stream through an [`Intervention`], which is where circuits
//! are applied.

mod hooks;
mod sites;
mod train;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use hooks::{HardMask, Intervention, NoHook, SoftMask};
pub use sites::{MediatorSiteMap, Module, Site, Stack};
pub use train::{train_base, BaseTrainSpec, EpochReport};

use crate::error::{Error, Result};
use crate::grammar::{BOS_ID, EOS_ID, PAD_ID};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Checkpoint, ParamId, ParamStore, Real, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderDecoder,
    DecoderOnlyBidirectional,
}

/// Nonlinearity applied to the gate branch of the GLU feed-forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Silu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    Sinusoidal,
    /// An explicit table stored with the weights.
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head query/key/value width.
    pub d_head: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub layer_norm: bool,
    pub gate: Gate,
    pub positions: Positions,
}

impl ModelConfig {
    /// Encoder-decoder with `d_head = d_model / n_heads`, SiLU gate and sinusoidal positions.
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_decoder(
        n_enc_layers: usize,
        n_dec_layers: usize,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
        max_len: usize,
        src_vocab: usize,
        tgt_vocab: usize,
    ) -> ModelConfig {
        ModelConfig {
            arch: Arch::EncoderDecoder,
            n_enc_layers,
            n_dec_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            ffn_hidden,
            dropout: 0.0,
            max_len,
            src_vocab,
            tgt_vocab,
            layer_norm: true,
            gate: Gate::Silu,
            positions: Positions::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 || self.ffn_hidden == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.positions == Positions::Sinusoidal && self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.src_vocab <= EOS_ID || self.tgt_vocab <= EOS_ID {
            return bad("vocabularies must contain the special tokens".into());
        }
        match self.arch {
            Arch::EncoderDecoder if self.n_enc_layers == 0 || self.n_dec_layers == 0 => {
                bad("encoder-decoder needs at least one layer per stack".into())
            }
            Arch::DecoderOnlyBidirectional if self.n_enc_layers != 0 || self.n_dec_layers == 0 => {
                bad("decoder-only models use n_dec_layers only".into())
            }
            _ => Ok(()),
        }
    }

    pub fn site_map(&self) -> MediatorSiteMap {
        MediatorSiteMap::new(self)
    }

    fn qkv(&self) -> usize {
        self.n_heads * self.d_head
    }
}

/// The standard sine/cosine table: even columns `sin(p / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn sinusoidal_positions<T: Real>(max_len: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(max_len * d_model);
    for p in 0..max_len {
        for j in 0..d_model {
            let i = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[max_len, d_model], data).expect("table shape")
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct FfIds {
    w1: ParamId,
    w2: ParamId,
    w3: ParamId,
}

#[derive(Clone, Debug)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln_self: Option<LnIds>,
    self_attn: AttnIds,
    ln_cross: Option<LnIds>,
    cross_attn: Option<AttnIds>,
    ln_ff: Option<LnIds>,
    ff: FfIds,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: Option<ParamId>,
    enc: Vec<LayerIds>,
    dec: Vec<LayerIds>,
    enc_final: Option<LnIds>,
    dec_final: Option<LnIds>,
    out: ParamId,
}

struct Builder<'a, T, F> {
    cfg: &'a ModelConfig,
    store: &'a mut ParamStore<T>,
    init: F,
}

impl<T: Real, F: FnMut(&str, &[usize]) -> Tensor<T>> Builder<'_, T, F> {
    fn add(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = (self.init)(&name, shape);
        self.store.add(name, t)
    }

    fn ln(&mut self, p: &str) -> Option<LnIds> {
        let d = self.cfg.d_model;
        self.cfg.layer_norm.then(|| LnIds {
            gain: self.add(format!("{}.gain", p), &[d]),
            bias: self.add(format!("{}.bias", p), &[d]),
        })
    }

    fn attn(&mut self, p: &str) -> AttnIds {
        let (d, qkv) = (self.cfg.d_model, self.cfg.qkv());
        AttnIds {
            wq: self.add(format!("{}.wq", p), &[d, qkv]),
            wk: self.add(format!("{}.wk", p), &[d, qkv]),
            wv: self.add(format!("{}.wv", p), &[d, qkv]),
            wo: self.add(format!("{}.wo", p), &[qkv, d]),
        }
    }

    fn ff(&mut self, p: &str) -> FfIds {
        let (d, h) = (self.cfg.d_model, self.cfg.ffn_hidden);
        FfIds {
            w1: self.add(format!("{}.w1", p), &[d, h]),
            w2: self.add(format!("{}.w2", p), &[d, h]),
            w3: self.add(format!("{}.w3", p), &[h, d]),
        }
    }

    fn layer(&mut self, p: &str, cross: bool) -> LayerIds {
        LayerIds {
            ln_self: self.ln(&format!("{}.ln_self", p)),
            self_attn: self.attn(&format!("{}.self_attn", p)),
            ln_cross: if cross { self.ln(&format!("{}.ln_cross", p)) } else { None },
            cross_attn: cross.then(|| self.attn(&format!("{}.cross_attn", p))),
            ln_ff: self.ln(&format!("{}.ln_ff", p)),
            ff: self.ff(&format!("{}.ff", p)),
        }
    }
}

/// Creates every parameter in a fixed order; the checkpoint directory follows it.
fn build_layout<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    init: impl FnMut(&str, &[usize]) -> Tensor<T>,
) -> Layout {
    let mut b = Builder { cfg, store, init };
    let d = cfg.d_model;
    let src_emb = b.add("src_emb".into(), &[cfg.src_vocab, d]);
    let cross = cfg.arch == Arch::EncoderDecoder;
    let tgt_emb = cross.then(|| b.add("tgt_emb".into(), &[cfg.tgt_vocab, d]));
    let enc = (0..cfg.n_enc_layers).map(|l| b.layer(&format!("enc.{}", l), false)).collect();
    let enc_final = if cfg.n_enc_layers > 0 { b.ln("enc.ln_final") } else { None };
    let dec = (0..cfg.n_dec_layers).map(|l| b.layer(&format!("dec.{}", l), cross)).collect();
    let dec_final = b.ln("dec.ln_final");
    let out = b.add("out".into(), &[d, cfg.tgt_vocab]);
    Layout {
        src_emb,
        tgt_emb,
        enc,
        dec,
        enc_final,
        dec_final,
        out,
    }
}

/// A source/target pair already mapped to ids, without special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedSample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Padded, teacher-forced batch.
///
/// For encoder-decoder models the decoder input is `BOS + tgt` and the
/// targets are `tgt + EOS`. For decoder-only models the single input is
/// `BOS + src` and the target at position `i` is `tgt[i]`; sources and
/// targets must then have equal length.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<bool>,
    pub tgt_len: usize,
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
    pub tgt_valid: Vec<bool>,
}

impl Batch {
    pub fn new(arch: Arch, samples: &[&EncodedSample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let size = samples.len();
        match arch {
            Arch::EncoderDecoder => {
                let src_len = samples.iter().map(|s| s.src.len()).max().unwrap_or(0).max(1);
                let tgt_len = samples.iter().map(|s| s.tgt.len() + 1).max().unwrap();
                let mut b = Batch::empty(size, src_len, tgt_len);
                for (i, s) in samples.iter().enumerate() {
                    for (j, &t) in s.src.iter().enumerate() {
                        b.src[i * src_len + j] = t;
                        b.src_valid[i * src_len + j] = true;
                    }
                    b.dec_in[i * tgt_len] = BOS_ID;
                    for (j, &t) in s.tgt.iter().enumerate() {
                        b.dec_in[i * tgt_len + j + 1] = t;
                    }
                    for (j, &t) in s.tgt.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
                        b.targets[i * tgt_len + j] = t;
                        b.tgt_valid[i * tgt_len + j] = true;
                    }
                }
                Ok(b)
            }
            Arch::DecoderOnlyBidirectional => {
                let n = samples.iter().map(|s| s.src.len()).max().unwrap();
                let src_len = n + 1;
                let mut b = Batch::empty(size, src_len, n);
                b.dec_in.clear();
                for (i, s) in samples.iter().enumerate() {
                    if s.tgt.len() != s.src.len() {
                        return Err(Error::shape(
                            "batch",
                            format!("decoder-only target length {} != source length {}", s.tgt.len(), s.src.len()),
                        ));
                    }
                    b.src[i * src_len] = BOS_ID;
                    b.src_valid[i * src_len] = true;
                    for (j, &t) in s.src.iter().enumerate() {
                        b.src[i * src_len + j + 1] = t;
                        b.src_valid[i * src_len + j + 1] = true;
                    }
                    for (j, &t) in s.tgt.iter().enumerate() {
                        b.targets[i * n + j] = t;
                        b.tgt_valid[i * n + j] = true;
                    }
                }
                Ok(b)
            }
        }
    }

    fn empty(size: usize, src_len: usize, tgt_len: usize) -> Batch {
        Batch {
            size,
            src_len,
            src: vec![PAD_ID; size * src_len],
            src_valid: vec![false; size * src_len],
            tgt_len,
            dec_in: vec![PAD_ID; size * tgt_len],
            targets: vec![PAD_ID; size * tgt_len],
            tgt_valid: vec![false; size * tgt_len],
        }
    }

    /// Number of output positions that carry a target.
    pub fn n_targets(&self) -> usize {
        self.tgt_valid.iter().filter(|&&v| v).count()
    }
}

/// Tape handles of a model's weights.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Result of one teacher-forced pass.
pub struct Forward {
    /// `[batch * tgt_len, tgt_vocab]`.
    pub logits: Var,
    /// Pre-intervention output of every hookable module, `[rows, d_model]`,
    /// in site-map block order.
    pub module_outputs: Vec<Var>,
}

/// Unhooked module outputs and logits of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub module_outputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    positions: Tensor<T>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

const NEG_INF_MASK: f64 = -1e9;

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    hook: &'a dyn Intervention<T>,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
    outputs: Vec<Var>,
}

impl<T: Real> Ctx<'_, T> {
    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - *p));
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < *p { T::zero() } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(&shape, mask)?);
        self.tape.mul(x, m)
    }

    /// Hooks a module output and adds it to the residual.
    fn write(&mut self, residual: Var, z: Var) -> Result<Var> {
        let z = self.dropout(z)?;
        let block = self.outputs.len();
        self.outputs.push(z);
        let hooked = self.hook.apply(self.tape, block, z)?;
        self.tape.add(residual, hooked)
    }
}

impl<T: Real> TransformerModel<T> {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, |name, shape| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![T::one(); n]
            } else if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let a = if name.ends_with("_emb") {
                    1.0
                } else {
                    (6.0 / (shape[0] + shape[1]) as f64).sqrt()
                };
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            };
            Tensor::new(shape, data).expect("init shape")
        });
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Ok(TransformerModel {
            config,
            params: store,
            positions,
            layout,
        })
    }

    /// Model with explicitly given weights; missing names are an error.
    pub fn from_named(config: ModelConfig, mut named: HashMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let positions = match config.positions {
            Positions::Sinusoidal => {
                named.remove("pos");
                sinusoidal_positions(config.max_len, config.d_model)
            }
            Positions::Table => named
                .remove("pos")
                .ok_or_else(|| Error::Format("missing tensor `pos`".into()))?,
        };
        if positions.shape() != [config.max_len, config.d_model] {
            return Err(Error::shape("positions", format!("{:?}", positions.shape())));
        }
        let mut missing = None;
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, |name, shape| match named.remove(name) {
            Some(t) if t.shape() == shape => t,
            _ => {
                missing.get_or_insert_with(|| name.to_string());
                Tensor::zeros(shape)
            }
        });
        if let Some(name) = missing {
            return Err(Error::Format(format!("missing or misshapen tensor `{}`", name)));
        }
        if let Some(name) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{}`", name)));
        }
        Ok(TransformerModel {
            config,
            params: store,
            positions,
            layout,
        })
    }

    pub fn site_map(&self) -> MediatorSiteMap {
        self.config.site_map()
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        out.push(("pos".into(), self.positions.clone()));
        out
    }

    pub fn to_checkpoint_bytes(&self, extra: serde_json::Value) -> Vec<u8> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            extra,
        };
        write_checkpoint(&Checkpoint {
            metadata: serde_json::to_string(&meta).expect("config serializes"),
            tensors: self.named_tensors(),
        })
    }

    /// Loads a model and the free-form metadata stored with it.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let ck = read_checkpoint::<T>(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.metadata)?;
        let named = ck.tensors.into_iter().collect();
        Ok((Self::from_named(meta.config, named)?, meta.extra))
    }

    /// SHA-256 over config and weights.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint_bytes(serde_json::Value::Null)))
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        let named = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        TransformerModel::from_named(self.config.clone(), named).expect("same layout")
    }

    /// Records every weight on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(id, p)| tape.param(id, p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }

    pub fn make_batch(&self, samples: &[&EncodedSample]) -> Result<Batch> {
        let b = Batch::new(self.config.arch, samples)?;
        self.check_batch(&b)?;
        Ok(b)
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        let len = b.src_len.max(b.tgt_len);
        if len > self.config.max_len {
            return Err(Error::LengthExceeded {
                len,
                max: self.config.max_len,
            });
        }
        let src_v = self.config.src_vocab;
        let tgt_v = self.config.tgt_vocab;
        if let Some(&t) = b.src.iter().find(|&&t| t >= src_v) {
            return Err(Error::UnknownToken(format!("input id {}", t)));
        }
        if let Some(&t) = b.dec_in.iter().chain(&b.targets).find(|&&t| t >= tgt_v) {
            return Err(Error::UnknownToken(format!("output id {}", t)));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape<T>, table: Var, ids: &[usize], len: usize) -> Result<Var> {
        let e = tape.embedding(table, ids)?;
        let d = self.config.d_model;
        let batch = ids.len() / len;
        let mut pos = Vec::with_capacity(ids.len() * d);
        for _ in 0..batch {
            pos.extend_from_slice(&self.positions.data()[..len * d]);
        }
        let p = tape.constant(Tensor::new(&[ids.len(), d], pos)?);
        tape.add(e, p)
    }

    fn norm(&self, tape: &mut Tape<T>, bound: &Bound, ln: &Option<LnIds>, x: Var) -> Result<Var> {
        match ln {
            Some(ln) => tape.layer_norm(x, bound.get(ln.gain), bound.get(ln.bias), 1e-5),
            None => Ok(x),
        }
    }

    /// Additive attention mask `[batch, q_len, k_len]`.
    fn attn_mask(&self, tape: &mut Tape<T>, batch: usize, q_len: usize, k_valid: &[bool], k_len: usize, causal: bool) -> Var {
        let neg = T::of(NEG_INF_MASK);
        let mut m = vec![T::zero(); batch * q_len * k_len];
        for b in 0..batch {
            for q in 0..q_len {
                for k in 0..k_len {
                    if !k_valid[b * k_len + k] || (causal && k > q) {
                        m[(b * q_len + q) * k_len + k] = neg;
                    }
                }
            }
        }
        tape.constant(Tensor::new(&[batch, q_len, k_len], m).expect("mask shape"))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        ids: &AttnIds,
        x: Var,
        kv: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        mask: Var,
    ) -> Result<Var> {
        let (h, dh) = (self.config.n_heads, self.config.d_head);
        let q = tape.matmul(x, bound.get(ids.wq))?;
        let k = tape.matmul(kv, bound.get(ids.wk))?;
        let v = tape.matmul(kv, bound.get(ids.wv))?;
        let q = tape.reshape(q, &[batch, q_len, h * dh])?;
        let k = tape.reshape(k, &[batch, k_len, h * dh])?;
        let v = tape.reshape(v, &[batch, k_len, h * dh])?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qi, ki, vi) = if h == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 2, i * dh, dh)?,
                    tape.slice(k, 2, i * dh, dh)?,
                    tape.slice(v, 2, i * dh, dh)?,
                )
            };
            let kt = tape.transpose(ki)?;
            let s = tape.bmm(qi, kt)?;
            let s = tape.scale(s, scale);
            let s = tape.add(s, mask)?;
            let p = tape.softmax(s, 2)?;
            heads.push(tape.bmm(p, vi)?);
        }
        let o = if h == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        let o = tape.reshape(o, &[batch * q_len, h * dh])?;
        tape.matmul(o, bound.get(ids.wo))
    }

    fn feed_forward(&self, tape: &mut Tape<T>, bound: &Bound, ids: &FfIds, x: Var) -> Result<Var> {
        let a = tape.matmul(x, bound.get(ids.w1))?;
        let g = tape.matmul(x, bound.get(ids.w2))?;
        let g = match self.config.gate {
            Gate::Silu => tape.silu(g),
            Gate::Sigmoid => tape.sigmoid(g),
        };
        let m = tape.mul(a, g)?;
        tape.matmul(m, bound.get(ids.w3))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        ctx: &mut Ctx<'_, T>,
        bound: &Bound,
        ids: &LayerIds,
        mut x: Var,
        batch: usize,
        len: usize,
        self_mask: Var,
        memory: Option<(Var, usize, Var)>,
    ) -> Result<Var> {
        let h = self.norm(ctx.tape, bound, &ids.ln_self, x)?;
        let a = self.attention(ctx.tape, bound, &ids.self_attn, h, h, batch, len, len, self_mask)?;
        x = ctx.write(x, a)?;
        if let (Some(cross), Some((mem, mem_len, mem_mask))) = (&ids.cross_attn, memory) {
            let h = self.norm(ctx.tape, bound, &ids.ln_cross, x)?;
            let a = self.attention(ctx.tape, bound, cross, h, mem, batch, len, mem_len, mem_mask)?;
            x = ctx.write(x, a)?;
        }
        let h = self.norm(ctx.tape, bound, &ids.ln_ff, x)?;
        let f = self.feed_forward(ctx.tape, bound, &ids.ff, h)?;
        ctx.write(x, f)
    }

    /// Encoder pass; returns the final encoder states `[batch * src_len, d]`.
    fn encode_in(&self, ctx: &mut Ctx<'_, T>, bound: &Bound, b: &Batch) -> Result<Var> {
        let mut x = self.embed(ctx.tape, bound.get(self.layout.src_emb), &b.src, b.src_len)?;
        let mask = self.attn_mask(ctx.tape, b.size, b.src_len, &b.src_valid, b.src_len, false);
        for ids in &self.layout.enc {
            x = self.layer(ctx, bound, ids, x, b.size, b.src_len, mask, None)?;
        }
        self.norm(ctx.tape, bound, &self.layout.enc_final, x)
    }

    /// Decoder pass over `dec_in` attending to `memory`; returns logits.
    fn decode_in(&self, ctx: &mut Ctx<'_, T>, bound: &Bound, b: &Batch, memory: Var) -> Result<Var> {
        let table = bound.get(self.layout.tgt_emb.expect("encoder-decoder"));
        let mut y = self.embed(ctx.tape, table, &b.dec_in, b.tgt_len)?;
        let dec_valid: Vec<bool> = b.dec_in.iter().map(|&t| t != PAD_ID).collect();
        let self_mask = self.attn_mask(ctx.tape, b.size, b.tgt_len, &dec_valid, b.tgt_len, true);
        let mem_mask = self.attn_mask(ctx.tape, b.size, b.tgt_len, &b.src_valid, b.src_len, false);
        for ids in &self.layout.dec {
            y = self.layer(ctx, bound, ids, y, b.size, b.tgt_len, self_mask, Some((memory, b.src_len, mem_mask)))?;
        }
        let y = self.norm(ctx.tape, bound, &self.layout.dec_final, y)?;
        ctx.tape.matmul(y, bound.get(self.layout.out))
    }

    fn single_stack(&self, ctx: &mut Ctx<'_, T>, bound: &Bound, b: &Batch) -> Result<Var> {
        let mut x = self.embed(ctx.tape, bound.get(self.layout.src_emb), &b.src, b.src_len)?;
        let mask = self.attn_mask(ctx.tape, b.size, b.src_len, &b.src_valid, b.src_len, false);
        for ids in &self.layout.dec {
            x = self.layer(ctx, bound, ids, x, b.size, b.src_len, mask, None)?;
        }
        let x = self.norm(ctx.tape, bound, &self.layout.dec_final, x)?;
        let d = self.config.d_model;
        let x = ctx.tape.reshape(x, &[b.size, b.src_len, d])?;
        let x = ctx.tape.slice(x, 1, 1, b.tgt_len)?;
        let x = ctx.tape.reshape(x, &[b.size * b.tgt_len, d])?;
        ctx.tape.matmul(x, bound.get(self.layout.out))
    }

    /// Teacher-forced pass through every module, hooking each module output.
    /// `dropout_rng` enables dropout (training only).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &Batch,
        hook: &dyn Intervention<T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let mut ctx = Ctx {
            tape,
            hook,
            dropout: dropout_rng.map(|r| (self.config.dropout, r)),
            outputs: Vec::new(),
        };
        let logits = match self.config.arch {
            Arch::EncoderDecoder => {
                let mem = self.encode_in(&mut ctx, bound, batch)?;
                self.decode_in(&mut ctx, bound, batch, mem)?
            }
            Arch::DecoderOnlyBidirectional => self.single_stack(&mut ctx, bound, batch)?,
        };
        Ok(Forward {
            logits,
            module_outputs: ctx.outputs,
        })
    }

    /// Logits and unhooked module outputs for a batch, without gradients.
    pub fn forward_teacher_forced(&self, batch: &Batch, hook: &dyn Intervention<T>) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &bound, batch, hook, None)?;
        Ok(ForwardTrace {
            module_outputs: f.module_outputs.iter().map(|v| tape.value(*v).clone()).collect(),
            logits: tape.value(f.logits).clone(),
        })
    }

    /// Logits only; cheaper than [`forward_teacher_forced`](Self::forward_teacher_forced).
    pub fn logits(&self, batch: &Batch, hook: &dyn Intervention<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &bound, batch, hook, None)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Greedy decoding; ties go to the lowest token id. Outputs exclude the
    /// terminating EOS. Decoder-only models emit one token per input position.
    pub fn greedy_decode(&self, srcs: &[&[usize]], hook: &dyn Intervention<T>) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        match self.config.arch {
            Arch::DecoderOnlyBidirectional => {
                let samples: Vec<EncodedSample> = srcs
                    .iter()
                    .map(|s| EncodedSample {
                        src: s.to_vec(),
                        tgt: vec![PAD_ID; s.len()],
                    })
                    .collect();
                let refs: Vec<&EncodedSample> = samples.iter().collect();
                let b = self.make_batch(&refs)?;
                let logits = self.logits(&b, hook)?;
                Ok((0..b.size)
                    .map(|i| (0..srcs[i].len()).map(|j| argmax(logits.row(i * b.tgt_len + j))).collect())
                    .collect())
            }
            Arch::EncoderDecoder => self.greedy_encdec(srcs, hook),
        }
    }

    fn greedy_encdec(&self, srcs: &[&[usize]], hook: &dyn Intervention<T>) -> Result<Vec<Vec<usize>>> {
        let n = srcs.len();
        let samples: Vec<EncodedSample> = srcs
            .iter()
            .map(|s| EncodedSample {
                src: s.to_vec(),
                tgt: Vec::new(),
            })
            .collect();
        let refs: Vec<&EncodedSample> = samples.iter().collect();
        let mut b = self.make_batch(&refs)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut ctx = Ctx {
            tape: &mut tape,
            hook,
            dropout: None,
            outputs: Vec::new(),
        };
        let memory = self.encode_in(&mut ctx, &bound, &b)?;
        let enc_blocks = ctx.outputs.len();
        let memory = tape.value(memory).clone();

        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let max_steps = self.config.max_len - 1;
        for step in 0..max_steps {
            let len = step + 1;
            b.tgt_len = len;
            b.dec_in = vec![PAD_ID; n * len];
            for (i, out) in outputs.iter().enumerate() {
                // Finished rows are padded with EOS; whatever they predict
                // afterwards is discarded.
                let row = &mut b.dec_in[i * len..(i + 1) * len];
                row[0] = BOS_ID;
                for (j, slot) in row.iter_mut().enumerate().skip(1) {
                    *slot = out.get(j - 1).copied().unwrap_or(EOS_ID);
                }
            }
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let mem = tape.constant(memory.clone());
            let mut ctx = Ctx {
                tape: &mut tape,
                hook,
                dropout: None,
                outputs: vec![mem; enc_blocks],
            };
            let logits = self.decode_in(&mut ctx, &bound, &b, mem)?;
            let logits = tape.value(logits);
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let tok = argmax(logits.row(i * len + step));
                if tok == EOS_ID {
                    done[i] = true;
                } else {
                    outputs[i].push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a `[rows, V]` tensor, computed in f64.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests;
