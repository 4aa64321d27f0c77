//! Experiment configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! seed = 0
//! [data]
//! tasks = copy, reverse, echo, repeat
//! n_train = 2000
//! [mask]
//! lambda = 1e-4
//! [mask.repeat]
//! epochs = 200
//! ```
//!
//! Unknown sections or keys are errors, so typos never silently fall back
//! to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use circomp::grammar::{GenConfig, OpKind};
use circomp::masking::{AblationKind, TrainSpec};
use circomp::model::BaseTrainSpec;
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_hidden: 128,
            max_len: 16,
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sensitivity {
    pub task: OpKind,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracrSpec {
    pub tasks: Vec<OpKind>,
    /// Mask-training seeds; more than one checks convergence to the same mask.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Tasks with their own isolated datasets; the base model trains on all of them.
    pub tasks: Vec<OpKind>,
    pub gen: GenConfig,
    pub model: ModelSpec,
    pub base: BaseTrainSpec,
    /// Tasks that get a circuit (defaults to all data tasks).
    pub circuits: Vec<OpKind>,
    pub ablation: AblationKind,
    pub mask: TrainSpec,
    pub mask_overrides: BTreeMap<OpKind, TrainSpec>,
    pub eval_batch: usize,
    pub sensitivity: Option<Sensitivity>,
    /// Union pairs `(a, b)`; both orders are evaluated.
    pub compose: Vec<(OpKind, OpKind)>,
    /// Composite whose emergence the report checks: `(a, b, eval task)`.
    pub emergence: Option<(OpKind, OpKind, OpKind)>,
    pub tracr: TracrSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tasks = vec![OpKind::Copy, OpKind::Reverse, OpKind::Echo, OpKind::Repeat];
        ExperimentConfig {
            seed: 0,
            circuits: tasks.clone(),
            tasks,
            gen: GenConfig {
                alphabet_size: 10,
                max_depth: 1,
                n_train: 2000,
                n_val: 500,
                ..GenConfig::default()
            },
            model: ModelSpec::default(),
            base: BaseTrainSpec {
                epochs: 20,
                batch_size: 64,
                lr: 1e-3,
                clip: 15.0,
                warmup_steps: 100,
                linear_decay: true,
                seed: 0,
            },
            ablation: AblationKind::Mean,
            mask: TrainSpec {
                lr: 0.01,
                epochs: 60,
                batch_size: 16,
                ..TrainSpec::default()
            },
            // Repeat's circuit needs longer annealing to prune below half the sites.
            mask_overrides: BTreeMap::from([(
                OpKind::Repeat,
                TrainSpec {
                    lr: 0.01,
                    epochs: 100,
                    batch_size: 16,
                    ..TrainSpec::default()
                },
            )]),
            eval_batch: 64,
            sensitivity: Some(Sensitivity {
                task: OpKind::Copy,
                lambdas: vec![1e-2, 1e-4, 1e-6],
            }),
            compose: vec![(OpKind::Repeat, OpKind::Reverse)],
            emergence: Some((OpKind::Repeat, OpKind::Reverse, OpKind::Echo)),
            tracr: TracrSpec {
                tasks: vec![OpKind::Copy, OpKind::Reverse, OpKind::Swap, OpKind::Echo],
                seeds: vec![0],
            },
        }
    }
}

/// `(key, value, line)`.
type Entry = (String, String, usize);
/// Raw parse: section name → entries in file order.
type Sections = BTreeMap<String, Vec<Entry>>;

fn lex(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut section = String::new();
    out.insert(section.clone(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::config(format!("line {}: unterminated section header", i + 1)))?
                .trim();
            if name.is_empty() {
                return Err(CliError::config(format!("line {}: empty section name", i + 1)));
            }
            section = name.to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::config(format!("line {}: empty key", i + 1)));
        }
        let entries = out.get_mut(&section).expect("section inserted");
        if entries.iter().any(|(ek, _, _)| ek == k) {
            return Err(CliError::config(format!("line {}: duplicate key `{}`", i + 1, k)));
        }
        entries.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

fn value<T: FromStr>(section: &str, key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| {
        CliError::config(format!(
            "line {}: bad value `{}` for {}{}",
            line,
            v,
            if section.is_empty() { String::new() } else { format!("[{}] ", section) },
            key
        ))
    })
}

fn list<T: FromStr>(section: &str, key: &str, v: &str, line: usize) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(section, key, s, line))
        .collect()
}

fn bool_value(section: &str, key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => value::<bool>(section, key, v, line),
    }
}

fn pair(section: &str, key: &str, v: &str, line: usize) -> Result<(OpKind, OpKind)> {
    let (a, b) = v
        .split_once('+')
        .ok_or_else(|| CliError::config(format!("line {}: expected `a+b` in [{}] {}", line, section, key)))?;
    Ok((value(section, key, a.trim(), line)?, value(section, key, b.trim(), line)?))
}

fn unknown(section: &str, key: &str, line: usize) -> CliError {
    if section.is_empty() {
        CliError::config(format!("line {}: unknown key `{}`", line, key))
    } else {
        CliError::config(format!("line {}: unknown key `{}` in [{}]", line, key, section))
    }
}

fn apply_mask_key(spec: &mut TrainSpec, section: &str, k: &str, v: &str, line: usize) -> Result<bool> {
    match k {
        "lambda" => spec.lambda = value(section, k, v, line)?,
        "lr" => spec.lr = value(section, k, v, line)?,
        "epochs" => spec.epochs = value(section, k, v, line)?,
        "beta_max" => spec.beta_max = value(section, k, v, line)?,
        "s_init" => spec.s_init = value(section, k, v, line)?,
        "batch_size" => spec.batch_size = value(section, k, v, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let sections = lex(text)?;
        // Hyperparameters default to the desk values; which sweeps, unions
        // and per-task overrides exist is up to the file alone.
        let mut c = ExperimentConfig {
            mask_overrides: BTreeMap::new(),
            sensitivity: None,
            compose: Vec::new(),
            emergence: None,
            ..ExperimentConfig::default()
        };
        let mut circuits_set = false;
        // Per-task mask sections are applied on top of the final [mask] values.
        let mut overrides: Vec<(OpKind, &[Entry])> = Vec::new();
        for (name, entries) in &sections {
            let s = name.as_str();
            if let Some(task) = s.strip_prefix("mask.") {
                let op = OpKind::from_name(task)
                    .ok_or_else(|| CliError::config(format!("unknown task in section [{}]", s)))?;
                overrides.push((op, entries));
                continue;
            }
            for (k, v, line) in entries {
                let (k, v, line) = (k.as_str(), v.as_str(), *line);
                match (s, k) {
                    ("", "seed") => c.seed = value(s, k, v, line)?,
                    ("data", "tasks") => c.tasks = list(s, k, v, line)?,
                    ("data", "alphabet_size") => c.gen.alphabet_size = value(s, k, v, line)?,
                    ("data", "max_digit") => c.gen.max_digit = value(s, k, v, line)?,
                    ("data", "min_string_len") => c.gen.min_string_len = value(s, k, v, line)?,
                    ("data", "max_string_len") => c.gen.max_string_len = value(s, k, v, line)?,
                    ("data", "max_depth") => c.gen.max_depth = value(s, k, v, line)?,
                    ("data", "p_recurse") => c.gen.p_recurse = value(s, k, v, line)?,
                    ("data", "n_train") => c.gen.n_train = value(s, k, v, line)?,
                    ("data", "n_val") => c.gen.n_val = value(s, k, v, line)?,
                    ("model", "enc_layers") => c.model.enc_layers = value(s, k, v, line)?,
                    ("model", "dec_layers") => c.model.dec_layers = value(s, k, v, line)?,
                    ("model", "d_model") => c.model.d_model = value(s, k, v, line)?,
                    ("model", "n_heads") => c.model.n_heads = value(s, k, v, line)?,
                    ("model", "ffn_hidden") => c.model.ffn_hidden = value(s, k, v, line)?,
                    ("model", "max_len") => c.model.max_len = value(s, k, v, line)?,
                    ("model", "dropout") => c.model.dropout = value(s, k, v, line)?,
                    ("base", "epochs") => c.base.epochs = value(s, k, v, line)?,
                    ("base", "batch_size") => c.base.batch_size = value(s, k, v, line)?,
                    ("base", "lr") => c.base.lr = value(s, k, v, line)?,
                    ("base", "clip") => c.base.clip = value(s, k, v, line)?,
                    ("base", "warmup_steps") => c.base.warmup_steps = value(s, k, v, line)?,
                    ("base", "linear_decay") => c.base.linear_decay = bool_value(s, k, v, line)?,
                    ("mask", "tasks") => {
                        c.circuits = list(s, k, v, line)?;
                        circuits_set = true;
                    }
                    ("mask", "ablation") => c.ablation = value(s, k, v, line)?,
                    ("mask", _) => {
                        if !apply_mask_key(&mut c.mask, s, k, v, line)? {
                            return Err(unknown(s, k, line));
                        }
                    }
                    ("eval", "batch_size") => c.eval_batch = value(s, k, v, line)?,
                    ("sensitivity", "task") => {
                        let task = value(s, k, v, line)?;
                        c.sensitivity.get_or_insert(Sensitivity { task, lambdas: Vec::new() }).task = task;
                    }
                    ("sensitivity", "lambdas") => {
                        let lambdas = list(s, k, v, line)?;
                        c.sensitivity
                            .get_or_insert(Sensitivity {
                                task: OpKind::Copy,
                                lambdas: Vec::new(),
                            })
                            .lambdas = lambdas;
                    }
                    ("compose", "pairs") => {
                        c.compose = v
                            .split(',')
                            .map(str::trim)
                            .filter(|p| !p.is_empty())
                            .map(|p| pair(s, k, p, line))
                            .collect::<Result<_>>()?;
                    }
                    ("compose", "emergence") => {
                        let (p, task) = v.split_once(':').ok_or_else(|| {
                            CliError::config(format!("line {}: expected `a+b:task` for [compose] emergence", line))
                        })?;
                        let (a, b) = pair(s, k, p.trim(), line)?;
                        c.emergence = Some((a, b, value(s, k, task.trim(), line)?));
                    }
                    ("tracr", "tasks") => c.tracr.tasks = list(s, k, v, line)?,
                    ("tracr", "seeds") => c.tracr.seeds = list(s, k, v, line)?,
                    ("" | "data" | "model" | "base" | "eval" | "sensitivity" | "compose" | "tracr", _) => {
                        return Err(unknown(s, k, line))
                    }
                    _ => return Err(CliError::config(format!("unknown section [{}]", s))),
                }
            }
        }
        for (op, entries) in overrides {
            let mut spec = c.mask.clone();
            for (k, v, line) in entries {
                if !apply_mask_key(&mut spec, &format!("mask.{}", op), k, v, *line)? {
                    return Err(unknown(&format!("mask.{}", op), k, *line));
                }
            }
            c.mask_overrides.insert(op, spec);
        }
        if !circuits_set {
            c.circuits = c.tasks.clone();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {}", path.display(), e)))?;
        ExperimentConfig::parse(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> ExperimentConfig {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::config(m));
        if self.tasks.is_empty() {
            return fail("[data] tasks is empty".into());
        }
        let mut seen = Vec::new();
        for t in &self.tasks {
            if seen.contains(t) {
                return fail(format!("task {} listed twice", t));
            }
            seen.push(*t);
        }
        for t in &self.circuits {
            if !self.tasks.contains(t) {
                return fail(format!("circuit task {} has no dataset", t));
            }
        }
        for t in self.mask_overrides.keys() {
            if !self.circuits.contains(t) {
                return fail(format!("[mask.{}] overrides a task without a circuit", t));
            }
        }
        for (a, b) in &self.compose {
            if !self.circuits.contains(a) || !self.circuits.contains(b) {
                return fail(format!("compose pair {}+{} needs circuits for both tasks", a, b));
            }
        }
        if let Some((a, b, t)) = self.emergence {
            if !self.compose.contains(&(a, b)) && !self.compose.contains(&(b, a)) {
                return fail(format!("emergence pair {}+{} is not in [compose] pairs", a, b));
            }
            if !self.tasks.contains(&t) {
                return fail(format!("emergence task {} has no dataset", t));
            }
        }
        if let Some(s) = &self.sensitivity {
            if !self.tasks.contains(&s.task) {
                return fail(format!("sensitivity task {} has no dataset", s.task));
            }
            if s.lambdas.iter().any(|l| !(*l >= 0.0)) {
                return fail("sensitivity lambdas must be non-negative".into());
            }
        }
        if self.tracr.seeds.is_empty() {
            return fail("[tracr] seeds is empty".into());
        }
        if self.eval_batch == 0 {
            return fail("[eval] batch_size must be positive".into());
        }
        self.gen.validate().map_err(CliError::from_core_as_config)?;
        self.mask.validate().map_err(CliError::from_core_as_config)?;
        for s in self.mask_overrides.values() {
            s.validate().map_err(CliError::from_core_as_config)?;
        }
        if self.base.batch_size == 0 {
            return fail("[base] batch_size must be positive".into());
        }
        Ok(())
    }

    /// Mask-training spec for `task` (without its seed).
    pub fn mask_spec(&self, task: OpKind) -> TrainSpec {
        self.mask_overrides.get(&task).cloned().unwrap_or_else(|| self.mask.clone())
    }
}

/// Deterministic per-stage seed derived from the global seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
