use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Node, RaspProgram, Value};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mask_overlap};
use crate::grammar::{OpKind, Vocabulary, BOS, BOS_ID, EOS, PAD};
use crate::masking::{binarize, train_mask, AblationSpec, Circuit, OutputCache, TrainSpec};
use crate::model::{Arch, EncodedSample, Gate, ModelConfig, NoHook, Positions, TransformerModel};
use crate::tensor::Tensor;

/// Attention logit for a matching key (before the model's `1/√d_head`).
pub const ATTENTION_SCALE: f32 = 100.0;
/// Attention logit of the BOS key, as a fraction of [`ATTENTION_SCALE`].
/// Queries with no matching key fall back to BOS, whose value is zero.
pub const BOS_DEFAULT: f32 = 0.7;
/// Output logit of the predicted token.
pub const OUTPUT_LOGIT: f32 = 10.0;
/// Gate pre-activation of lookup-table MLP units; `silu(64) == 64` in f32.
const GATE: f32 = 64.0;

/// Size limits of a compiled model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileConfig {
    pub d_model: usize,
    /// Query/key/value width of each head.
    pub d_head: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

/// Reference sizes for the four compiled programs.
pub fn reference_config(task: OpKind) -> Result<CompileConfig> {
    let (d_model, d_head, n_layers, n_heads) = match task {
        OpKind::Copy => (15, 6, 1, 1),
        OpKind::Reverse => (37, 10, 4, 1),
        OpKind::Echo => (46, 9, 4, 2),
        OpKind::Swap => (74, 13, 6, 1),
        other => return Err(Error::UnsupportedTask(other.name().to_string())),
    };
    Ok(CompileConfig {
        d_model,
        d_head,
        n_layers,
        n_heads,
    })
}

/// A decoder-only transformer whose weights implement a program.
#[derive(Clone, Debug)]
pub struct CompiledModel {
    pub model: TransformerModel<f32>,
    /// Program variable carried by each residual dimension.
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub program: String,
    pub seq_len: usize,
    pub slot: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    program: String,
    seq_len: usize,
    slot: Option<String>,
    labels: Vec<String>,
    input: Vec<String>,
    output: Vec<String>,
}

impl CompiledModel {
    pub fn input_ids<S: AsRef<str>>(&self, x: &[S]) -> Result<Vec<usize>> {
        let mut v: Vec<String> = x.iter().map(|s| s.as_ref().to_string()).collect();
        v.extend(self.slot.clone());
        self.vocab.encode_source(&v)
    }

    /// Teacher-forcing samples whose targets are the given outputs.
    pub fn samples<S: AsRef<str>>(&self, inputs: &[Vec<S>], outputs: &[Vec<String>]) -> Result<Vec<EncodedSample>> {
        inputs
            .iter()
            .zip(outputs)
            .map(|(x, y)| {
                Ok(EncodedSample {
                    src: self.input_ids(x)?,
                    tgt: self.vocab.encode_target(y)?,
                })
            })
            .collect()
    }

    /// Greedy outputs as tokens.
    pub fn run<S: AsRef<str>>(&self, inputs: &[Vec<S>]) -> Result<Vec<Vec<String>>> {
        let ids = inputs.iter().map(|x| self.input_ids(x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[usize]> = ids.iter().map(|v| v.as_slice()).collect();
        Ok(self
            .model
            .greedy_decode(&refs, &NoHook)?
            .iter()
            .map(|o| self.vocab.decode_output(o))
            .collect())
    }

    /// Writes the checkpoint to `path` and the basis labels to `<path>.labels.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let side = Sidecar {
            program: self.program.clone(),
            seq_len: self.seq_len,
            slot: self.slot.clone(),
            labels: self.labels.clone(),
            input: self.vocab.input_tokens().to_vec(),
            output: self.vocab.output_tokens().to_vec(),
        };
        fs::write(path, self.model.to_checkpoint_bytes(serde_json::Value::Null))?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CompiledModel> {
        let (model, _) = TransformerModel::from_checkpoint_bytes(&fs::read(path)?)?;
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if side.labels.len() != model.config.d_model {
            return Err(Error::Format("basis labels do not match the model width".into()));
        }
        Ok(CompiledModel {
            model,
            labels: side.labels,
            vocab: Vocabulary::from_tokens(side.input, side.output)?,
            program: side.program,
            seq_len: side.seq_len,
            slot: side.slot,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".labels.json");
    s.into()
}

fn overflow(what: &'static str, needed: usize, available: usize) -> Result<()> {
    if needed > available {
        return Err(Error::DimensionOverflow { what, needed, available });
    }
    Ok(())
}

/// Residual dimensions of each sequence node, keyed by value.
struct Space {
    dims: HashMap<Value, usize>,
    values: Vec<Value>,
}

/// Compiles `program` over `alphabet` into weights of the given size.
pub fn compile<S: AsRef<str>>(program: &RaspProgram, alphabet: &[S], cfg: CompileConfig) -> Result<CompiledModel> {
    let output = program.output()?;
    let nodes = program.nodes();
    let alphabet: Vec<String> = alphabet.iter().map(|s| s.as_ref().to_string()).collect();
    let input_len = program.input_len();

    // Value domains.
    let token_dom: BTreeSet<Value> = alphabet.iter().chain(&program.slot).map(|t| Value::Sym(t.clone())).collect();
    let index_dom: BTreeSet<Value> = (0..input_len as i64).map(Value::Int).collect();
    let mut doms: Vec<BTreeSet<Value>> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let d = match node {
            Node::Tokens => token_dom.clone(),
            Node::Indices => index_dom.clone(),
            Node::Map { input, f, .. } => doms[input.0].iter().filter_map(|v| f(v)).collect(),
            Node::Select { .. } => BTreeSet::new(),
            Node::Aggregate { values, .. } => doms[values.0].clone(),
        };
        doms.push(d);
    }

    // Residual layout.
    let mut labels = vec!["one".to_string(), format!("tokens:{}", BOS)];
    let alloc = |labels: &mut Vec<String>, name: &str, dom: &BTreeSet<Value>| -> Space {
        let start = labels.len();
        labels.extend(dom.iter().map(|v| format!("{}:{}", name, v)));
        Space {
            dims: dom.iter().cloned().zip(start..).collect(),
            values: dom.iter().cloned().collect(),
        }
    };
    let tokens_space = alloc(&mut labels, "tokens", &token_dom);
    let index_space = alloc(&mut labels, "indices", &index_dom);
    let mut spaces: Vec<Option<Space>> = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        spaces.push(match node {
            Node::Map { label, .. } | Node::Aggregate { label, .. } => Some(alloc(&mut labels, label, &doms[i])),
            _ => None,
        });
    }
    overflow("residual dimensions", labels.len(), cfg.d_model)?;
    let space = |i: usize| -> &Space {
        match nodes[i] {
            Node::Tokens => &tokens_space,
            Node::Indices => &index_space,
            _ => spaces[i].as_ref().expect("sequence node"),
        }
    };

    // Sublayer schedule: attention of layer l is sublayer 2l, its MLP 2l+1.
    let mut ready = vec![0usize; nodes.len()];
    let mut slot = vec![usize::MAX; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        match node {
            Node::Tokens | Node::Indices => {}
            Node::Select { keys, queries, .. } => ready[i] = ready[keys.0].max(ready[queries.0]),
            Node::Map { input, .. } => {
                let r = ready[input.0];
                slot[i] = if r % 2 == 1 { r } else { r + 1 };
                ready[i] = slot[i] + 1;
            }
            Node::Aggregate { selector, values, .. } => {
                let r = ready[selector.0].max(ready[values.0]);
                slot[i] = if r % 2 == 0 { r } else { r + 1 };
                ready[i] = slot[i] + 1;
            }
        }
    }
    let layers_needed = slot.iter().filter(|&&s| s != usize::MAX).map(|s| s / 2 + 1).max().unwrap_or(0);
    overflow("layers", layers_needed, cfg.n_layers)?;
    let mut heads = vec![0usize; cfg.n_layers];
    let mut hidden = vec![0usize; cfg.n_layers];
    for (i, node) in nodes.iter().enumerate() {
        match node {
            Node::Aggregate { selector, values, .. } => {
                heads[slot[i] / 2] += 1;
                let Node::Select { keys, .. } = &nodes[selector.0] else { unreachable!() };
                overflow("query/key width", doms[keys.0].len() + 1, cfg.d_head)?;
                overflow("value width", doms[values.0].len(), cfg.d_head)?;
            }
            Node::Map { input, f, .. } => {
                hidden[slot[i] / 2] += doms[input.0].iter().filter(|v| f(v).is_some()).count();
            }
            _ => {}
        }
    }
    overflow("attention heads", heads.iter().copied().max().unwrap_or(0), cfg.n_heads)?;

    // Vocabularies.
    let specials = [PAD, BOS, EOS].map(String::from);
    let input_tokens: Vec<String> = specials.iter().cloned().chain(alphabet.iter().cloned()).chain(program.slot.clone()).collect();
    let out_dom = &doms[output.0];
    let mut output_tokens: Vec<String> = specials.to_vec();
    for v in out_dom {
        match v {
            Value::Sym(s) if !output_tokens.contains(s) => output_tokens.push(s.clone()),
            Value::Sym(_) => {}
            Value::Int(_) => {
                return Err(Error::InvalidConfig(format!("program `{}` outputs integers", program.name)));
            }
        }
    }
    let vocab = Vocabulary::from_tokens(input_tokens, output_tokens)?;

    let config = ModelConfig {
        arch: Arch::DecoderOnlyBidirectional,
        n_enc_layers: 0,
        n_dec_layers: cfg.n_layers,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        d_head: cfg.d_head,
        ffn_hidden: hidden.iter().copied().max().unwrap_or(0).max(1),
        dropout: 0.0,
        max_len: input_len + 1,
        src_vocab: vocab.input_size(),
        tgt_vocab: vocab.output_size(),
        layer_norm: false,
        gate: Gate::Silu,
        positions: Positions::Table,
    };
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let qkv = cfg.n_heads * dh;
    let h_ff = config.ffn_hidden;
    let mut w: HashMap<String, Vec<f32>> = HashMap::new();
    let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
    let mut add = |name: String, shape: Vec<usize>| {
        w.insert(name.clone(), vec![0.0; shape.iter().product()]);
        shapes.insert(name, shape);
    };
    add("src_emb".into(), vec![vocab.input_size(), d]);
    add("pos".into(), vec![input_len + 1, d]);
    add("out".into(), vec![d, vocab.output_size()]);
    for l in 0..cfg.n_layers {
        for (m, shape) in [("wq", [d, qkv]), ("wk", [d, qkv]), ("wv", [d, qkv]), ("wo", [qkv, d])] {
            add(format!("dec.{}.self_attn.{}", l, m), shape.to_vec());
        }
        for (m, shape) in [("w1", [d, h_ff]), ("w2", [d, h_ff]), ("w3", [h_ff, d])] {
            add(format!("dec.{}.ff.{}", l, m), shape.to_vec());
        }
    }
    let set = |w: &mut HashMap<String, Vec<f32>>, name: &str, r: usize, c: usize, v: f32| {
        let cols = shapes[name][1];
        w.get_mut(name).expect("weight")[r * cols + c] = v;
    };

    // Embeddings: constant "one", token one-hot, index one-hot (BOS has none).
    set(&mut w, "src_emb", BOS_ID, 0, 1.0);
    set(&mut w, "src_emb", BOS_ID, 1, 1.0);
    for (v, &dim) in &tokens_space.dims {
        let id = vocab.input_id(&v.to_string())?;
        set(&mut w, "src_emb", id, 0, 1.0);
        set(&mut w, "src_emb", id, dim, 1.0);
    }
    for p in 0..input_len {
        set(&mut w, "pos", p + 1, index_space.dims[&Value::Int(p as i64)], 1.0);
    }
    for (v, &dim) in &space(output.0).dims {
        set(&mut w, "out", dim, vocab.output_id(&v.to_string())?, OUTPUT_LOGIT);
    }

    let q_scale = ATTENTION_SCALE * (dh as f32).sqrt();
    let mut head_used = vec![0usize; cfg.n_layers];
    let mut unit_used = vec![0usize; cfg.n_layers];
    for (i, node) in nodes.iter().enumerate() {
        match node {
            Node::Aggregate { selector, values, .. } => {
                let l = slot[i] / 2;
                let h = head_used[l];
                head_used[l] += 1;
                let Node::Select { keys, queries, predicate } = &nodes[selector.0] else { unreachable!() };
                let (ks, qs, vs, os) = (space(keys.0), space(queries.0), space(values.0), space(i));
                let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|m| format!("dec.{}.self_attn.{}", l, m));
                let bos_col = h * dh + ks.values.len();
                for (j, kv) in ks.values.iter().enumerate() {
                    set(&mut w, &wk, ks.dims[kv], h * dh + j, 1.0);
                    for qv in &qs.values {
                        if predicate.holds(kv, qv) {
                            set(&mut w, &wq, qs.dims[qv], h * dh + j, q_scale);
                        }
                    }
                }
                set(&mut w, &wk, 1, bos_col, 1.0);
                set(&mut w, &wq, 0, bos_col, BOS_DEFAULT * q_scale);
                for (c, vv) in vs.values.iter().enumerate() {
                    set(&mut w, &wv, vs.dims[vv], h * dh + c, 1.0);
                    set(&mut w, &wo, h * dh + c, os.dims[vv], 1.0);
                }
            }
            Node::Map { input, f, .. } => {
                let l = slot[i] / 2;
                let (is, os) = (space(input.0), space(i));
                let [w1, w2, w3] = ["w1", "w2", "w3"].map(|m| format!("dec.{}.ff.{}", l, m));
                for u in &is.values {
                    if let Some(v) = f(u) {
                        let k = unit_used[l];
                        unit_used[l] += 1;
                        set(&mut w, &w1, is.dims[u], k, 1.0);
                        set(&mut w, &w2, 0, k, GATE);
                        set(&mut w, &w3, k, os.dims[&v], 1.0 / GATE);
                    }
                }
            }
            _ => {}
        }
    }

    labels.extend((labels.len()..d).map(|i| format!("unused:{}", i)));
    let named = w
        .into_iter()
        .map(|(n, data)| {
            let t = Tensor::new(&shapes[&n], data)?;
            Ok((n, t))
        })
        .collect::<Result<HashMap<_, _>>>()?;
    Ok(CompiledModel {
        model: TransformerModel::from_named(config, named)?,
        labels,
        vocab,
        program: program.name.clone(),
        seq_len: program.seq_len,
        slot: program.slot.clone(),
    })
}

/// Sites whose output exceeds `1e-9` in magnitude at some non-BOS position
/// of some probe.
pub fn extract_ground_truth(compiled: &CompiledModel, probes: &[EncodedSample]) -> Result<Vec<bool>> {
    let model = &compiled.model;
    let map = model.site_map();
    let d = map.d_model();
    let mut active = vec![false; map.len()];
    for chunk in probes.chunks(64) {
        let refs: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = model.make_batch(&refs)?;
        let trace = model.forward_teacher_forced(&batch, &NoHook)?;
        for (blk, out) in trace.module_outputs.iter().enumerate() {
            for b in 0..batch.size {
                for p in 1..batch.src_len {
                    let r = b * batch.src_len + p;
                    if !batch.src_valid[r] {
                        continue;
                    }
                    for (j, v) in out.row(r).iter().enumerate() {
                        if v.abs() > 1e-9 {
                            active[blk * d + j] = true;
                        }
                    }
                }
            }
        }
    }
    Ok(active)
}

/// A zero-ablated circuit over a compiled model.
pub fn ground_truth_circuit(compiled: &CompiledModel, mask: Vec<bool>) -> Circuit {
    let n = mask.len();
    Circuit {
        mask,
        ablation: AblationSpec::zero(n),
        task: compiled.program.clone(),
        model_hash: compiled.model.hash(),
        site_map: compiled.model.site_map().descriptor(),
        train_spec: None,
        composition: None,
    }
}

/// Symbols `A1, B1, …` used as the compiled input alphabet.
pub fn probe_alphabet(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{}1", (b'A' + i as u8) as char)).collect()
}

/// Every length-`len` sequence over `alphabet`, in lexicographic order.
pub fn all_inputs(alphabet: &[String], len: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p: Vec<String>| {
                alphabet.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(a.clone());
                    q
                })
            })
            .collect();
    }
    out
}

/// All inputs over the compiled alphabet, with the task's reference outputs
/// as targets.
pub fn recovery_probes(compiled: &CompiledModel, task: OpKind) -> Result<Vec<EncodedSample>> {
    let alphabet: Vec<String> = compiled
        .vocab
        .input_tokens()
        .iter()
        .filter(|t| crate::grammar::is_symbol(t))
        .cloned()
        .collect();
    let inputs = all_inputs(&alphabet, compiled.seq_len);
    let outputs: Vec<Vec<String>> = inputs.iter().map(|x| task.apply(&[x.clone()])).collect();
    compiled.samples(&inputs, &outputs)
}

/// Mask-training settings for compiled models.
pub fn recovery_spec(task: OpKind, seed: u64) -> TrainSpec {
    TrainSpec {
        lambda: 1e-4,
        lr: 1e-3,
        epochs: if task == OpKind::Echo { 200 } else { 50 },
        beta_max: 200.0,
        s_init: 1.0,
        batch_size: 1,
        seed,
    }
}

/// Trains a zero-ablated mask on the compiled model against its own outputs.
pub fn discover(compiled: &CompiledModel, probes: &[EncodedSample], spec: &TrainSpec) -> Result<Circuit> {
    let model = &compiled.model;
    let cache = OutputCache::build(model, probes, 64)?;
    let ablation = AblationSpec::zero(model.site_map().len());
    let params = train_mask(model, probes, &cache, &ablation, spec)?;
    let mut c = ground_truth_circuit(compiled, binarize(&params.s));
    c.train_spec = Some(spec.clone());
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub task: String,
    pub iou: f64,
    pub iom: f64,
    pub f_t: f64,
    /// Exact-match accuracy of the discovered circuit on the probes.
    pub accuracy: f64,
    pub discovered: usize,
    pub truth: usize,
    pub pass: bool,
}

/// Compares a discovered circuit with the ground truth and measures its
/// faithfulness to the compiled model on `probes`.
pub fn validate_recovery(
    compiled: &CompiledModel,
    discovered: &Circuit,
    truth: &[bool],
    probes: &[EncodedSample],
) -> Result<RecoveryReport> {
    let (iou, iom) = mask_overlap(&discovered.mask, truth)?;
    let rec = evaluate(&compiled.model, discovered, &compiled.program, probes, None, 64)?;
    Ok(RecoveryReport {
        task: compiled.program.clone(),
        iou,
        iom,
        f_t: rec.f_t,
        accuracy: rec.accuracy,
        discovered: discovered.active(),
        truth: truth.iter().filter(|b| **b).count(),
        pass: iou == 1.0 && (rec.f_t - 1.0).abs() <= 1e-6,
    })
}
