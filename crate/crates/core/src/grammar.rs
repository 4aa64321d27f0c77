//! String-edit expressions: generation, parsing, evaluation, datasets and
//! vocabularies.
//!
//! Sources are written in prefix notation. A binary operator takes two
//! arguments separated by `,`; a run of symbols extends until an operator
//! word, a `,` or the end of the input.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEPARATOR: &str = ",";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Copy,
    Echo,
    Repeat,
    Reverse,
    Swap,
    Shift,
    Append,
    Prepend,
    RemoveFirst,
    RemoveSecond,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Copy,
        OpKind::Echo,
        OpKind::Repeat,
        OpKind::Reverse,
        OpKind::Swap,
        OpKind::Shift,
        OpKind::Append,
        OpKind::Prepend,
        OpKind::RemoveFirst,
        OpKind::RemoveSecond,
    ];

    pub const UNARY: [OpKind; 6] = [
        OpKind::Copy,
        OpKind::Echo,
        OpKind::Repeat,
        OpKind::Reverse,
        OpKind::Swap,
        OpKind::Shift,
    ];

    pub const BINARY: [OpKind; 4] = [
        OpKind::Append,
        OpKind::Prepend,
        OpKind::RemoveFirst,
        OpKind::RemoveSecond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Copy => "copy",
            OpKind::Echo => "echo",
            OpKind::Repeat => "repeat",
            OpKind::Reverse => "reverse",
            OpKind::Swap => "swap",
            OpKind::Shift => "shift",
            OpKind::Append => "append",
            OpKind::Prepend => "prepend",
            OpKind::RemoveFirst => "remove_first",
            OpKind::RemoveSecond => "remove_second",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|op| op.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Append | OpKind::Prepend | OpKind::RemoveFirst | OpKind::RemoveSecond => 2,
            _ => 1,
        }
    }

    /// Applies the operation to already evaluated arguments.
    pub fn apply(self, args: &[Vec<String>]) -> Vec<String> {
        debug_assert_eq!(args.len(), self.arity());
        let x = &args[0];
        match self {
            OpKind::Copy => x.clone(),
            OpKind::Echo => {
                let mut out = x.clone();
                out.extend(x.last().cloned());
                out
            }
            OpKind::Repeat => x.iter().chain(x).cloned().collect(),
            OpKind::Reverse => x.iter().rev().cloned().collect(),
            OpKind::Swap => {
                let mut out = x.clone();
                if let Some(last) = out.len().checked_sub(1) {
                    out.swap(0, last);
                }
                out
            }
            OpKind::Shift => {
                let mut out = x.clone();
                if !out.is_empty() {
                    out.rotate_left(1);
                }
                out
            }
            OpKind::Append => x.iter().chain(&args[1]).cloned().collect(),
            OpKind::Prepend => args[1].iter().chain(x).cloned().collect(),
            OpKind::RemoveFirst => args[1].clone(),
            OpKind::RemoveSecond => x.clone(),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::from_name(s).ok_or_else(|| Error::UnsupportedTask(s.to_string()))
    }
}

/// `true` for a letter `A`–`Z` followed by a positive integer.
pub fn is_symbol(tok: &str) -> bool {
    let mut chars = tok.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    let digits = chars.as_str();
    first.is_ascii_uppercase()
        && !digits.is_empty()
        && digits.bytes().all(|b| b.is_ascii_digit())
        && !digits.starts_with('0')
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Leaf(Vec<String>),
    Apply(OpKind, Vec<Expr>),
}

impl Expr {
    pub fn leaf<S: AsRef<str>>(symbols: &[S]) -> Expr {
        Expr::Leaf(symbols.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn apply(op: OpKind, args: Vec<Expr>) -> Expr {
        Expr::Apply(op, args)
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Apply(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    /// Every operator used anywhere in the tree, in pre-order.
    pub fn ops(&self) -> Vec<OpKind> {
        let mut out = Vec::new();
        self.collect_ops(&mut out);
        out
    }

    fn collect_ops(&self, out: &mut Vec<OpKind>) {
        if let Expr::Apply(op, args) = self {
            out.push(*op);
            for a in args {
                a.collect_ops(out);
            }
        }
    }
}

pub fn eval_expr(e: &Expr) -> Vec<String> {
    match e {
        Expr::Leaf(symbols) => symbols.clone(),
        Expr::Apply(op, args) => {
            let vals: Vec<Vec<String>> = args.iter().map(eval_expr).collect();
            op.apply(&vals)
        }
    }
}

/// Prefix rendering; the inverse of [`parse_source`].
pub fn render(e: &Expr) -> Vec<String> {
    let mut out = Vec::new();
    render_into(e, &mut out);
    out
}

fn render_into(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Leaf(symbols) => out.extend(symbols.iter().cloned()),
        Expr::Apply(op, args) => {
            out.push(op.name().to_string());
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push(SEPARATOR.to_string());
                }
                render_into(a, out);
            }
        }
    }
}

struct Parser<'a, S> {
    toks: &'a [S],
    pos: usize,
}

impl<S: AsRef<str>> Parser<'_, S> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(|t| t.as_ref())
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::MalformedInput {
            position: self.pos,
            reason: reason.into(),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.err("expected an argument, found end of input")),
            Some(SEPARATOR) => Err(self.err("empty argument before `,`")),
            Some(tok) => {
                if let Some(op) = OpKind::from_name(tok) {
                    self.pos += 1;
                    let mut args = Vec::with_capacity(op.arity());
                    args.push(self.expr()?);
                    if op.arity() == 2 {
                        if self.peek() != Some(SEPARATOR) {
                            return Err(self.err(format!("`{}` expects `,` between arguments", op)));
                        }
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    Ok(Expr::Apply(op, args))
                } else {
                    let mut symbols = Vec::new();
                    while let Some(tok) = self.peek() {
                        if tok == SEPARATOR || OpKind::from_name(tok).is_some() {
                            break;
                        }
                        if !is_symbol(tok) {
                            return Err(self.err(format!("unknown token `{}`", tok)));
                        }
                        symbols.push(tok.to_string());
                        self.pos += 1;
                    }
                    Ok(Expr::Leaf(symbols))
                }
            }
        }
    }
}

pub fn parse_source<S: AsRef<str>>(tokens: &[S]) -> Result<Expr> {
    let mut p = Parser {
        toks: tokens,
        pos: 0,
    };
    let e = p.expr()?;
    if p.pos < tokens.len() {
        let reason = match p.peek() {
            Some(SEPARATOR) => "stray separator".to_string(),
            Some(t) => format!("unexpected trailing token `{}`", t),
            None => unreachable!(),
        };
        return Err(p.err(reason));
    }
    Ok(e)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Sample {
    pub fn from_expr(e: &Expr) -> Sample {
        Sample {
            source: render(e),
            target: eval_expr(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub alphabet_size: usize,
    pub max_digit: usize,
    pub min_string_len: usize,
    pub max_string_len: usize,
    pub max_depth: usize,
    pub p_recurse: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            alphabet_size: 26,
            max_digit: 1,
            min_string_len: 1,
            max_string_len: 5,
            max_depth: 2,
            p_recurse: 0.1,
            n_train: 16_000,
            n_val: 4_000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return bad("alphabet_size must be in 1..=26");
        }
        if self.max_digit == 0 {
            return bad("max_digit must be positive");
        }
        if self.min_string_len == 0 || self.min_string_len > self.max_string_len {
            return bad("need 1 <= min_string_len <= max_string_len");
        }
        if !(0.0..1.0).contains(&self.p_recurse) {
            return bad("p_recurse must be in [0, 1)");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        Ok(())
    }

    pub fn symbols(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.alphabet_size * self.max_digit);
        for d in 1..=self.max_digit {
            for c in (b'A'..).take(self.alphabet_size) {
                out.push(format!("{}{}", c as char, d));
            }
        }
        out
    }
}

struct Generator<'a> {
    cfg: &'a GenConfig,
    ops: &'a [OpKind],
    symbols: Vec<String>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn leaf(&mut self) -> Expr {
        let len = self
            .rng
            .gen_range(self.cfg.min_string_len..=self.cfg.max_string_len);
        let syms = (0..len)
            .map(|_| self.symbols[self.rng.gen_range(0..self.symbols.len())].clone())
            .collect();
        Expr::Leaf(syms)
    }

    fn expr(&mut self, depth: usize) -> Expr {
        let op = self.ops[self.rng.gen_range(0..self.ops.len())];
        let args = (0..op.arity())
            .map(|_| {
                let nest = depth < self.cfg.max_depth && self.rng.gen::<f64>() < self.cfg.p_recurse;
                if nest {
                    self.expr(depth + 1)
                } else {
                    self.leaf()
                }
            })
            .collect();
        Expr::Apply(op, args)
    }
}

/// Generates (train, val) samples whose operators are drawn uniformly from `ops`.
pub fn gen_over(ops: &[OpKind], cfg: &GenConfig, stream: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    if ops.is_empty() {
        return Err(Error::InvalidConfig("no operators to generate from".into()));
    }
    let mut g = Generator {
        cfg,
        ops,
        symbols: cfg.symbols(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    g.rng.set_stream(stream);
    let mut draw = |n: usize| -> Vec<Sample> { (0..n).map(|_| Sample::from_expr(&g.expr(1))).collect() };
    let train = draw(cfg.n_train);
    let val = draw(cfg.n_val);
    Ok((train, val))
}

/// Samples that only use `op`, possibly nested.
pub fn gen_isolated(op: OpKind, cfg: &GenConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let stream = 1 + OpKind::ALL.iter().position(|o| *o == op).unwrap() as u64;
    gen_over(&[op], cfg, stream)
}

/// Samples over all ten operators and their compositions.
pub fn gen_mixed(cfg: &GenConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    gen_over(&OpKind::ALL, cfg, 0)
}

/// Token ↔ id maps for the encoder (input) and decoder (output) sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    input_tokens: Vec<String>,
    output_tokens: Vec<String>,
    input_index: HashMap<String, usize>,
    output_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    input: Vec<String>,
    output: Vec<String>,
}

fn with_specials(tokens: BTreeSet<String>) -> Vec<String> {
    [PAD, BOS, EOS]
        .iter()
        .map(|s| s.to_string())
        .chain(tokens.into_iter().filter(|t| ![PAD, BOS, EOS].contains(&t.as_str())))
        .collect()
}

fn index(tokens: &[String]) -> HashMap<String, usize> {
    tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

impl Vocabulary {
    pub fn from_tokens(input: Vec<String>, output: Vec<String>) -> Result<Vocabulary> {
        for side in [&input, &output] {
            if side.len() < 3 || side[PAD_ID] != PAD || side[BOS_ID] != BOS || side[EOS_ID] != EOS {
                return Err(Error::InvalidConfig(
                    "vocabulary must start with <pad>, <bos>, <eos>".into(),
                ));
            }
        }
        let v = Vocabulary {
            input_index: index(&input),
            output_index: index(&output),
            input_tokens: input,
            output_tokens: output,
        };
        if v.input_index.len() != v.input_tokens.len() || v.output_index.len() != v.output_tokens.len() {
            return Err(Error::InvalidConfig("duplicate vocabulary entries".into()));
        }
        Ok(v)
    }

    pub fn input_tokens(&self) -> &[String] {
        &self.input_tokens
    }

    pub fn output_tokens(&self) -> &[String] {
        &self.output_tokens
    }

    pub fn input_size(&self) -> usize {
        self.input_tokens.len()
    }

    pub fn output_size(&self) -> usize {
        self.output_tokens.len()
    }

    pub fn input_id(&self, tok: &str) -> Result<usize> {
        self.input_index
            .get(tok)
            .copied()
            .ok_or_else(|| Error::UnknownToken(tok.to_string()))
    }

    pub fn output_id(&self, tok: &str) -> Result<usize> {
        self.output_index
            .get(tok)
            .copied()
            .ok_or_else(|| Error::UnknownToken(tok.to_string()))
    }

    pub fn encode_source<S: AsRef<str>>(&self, toks: &[S]) -> Result<Vec<usize>> {
        toks.iter().map(|t| self.input_id(t.as_ref())).collect()
    }

    pub fn encode_target<S: AsRef<str>>(&self, toks: &[S]) -> Result<Vec<usize>> {
        toks.iter().map(|t| self.output_id(t.as_ref())).collect()
    }

    pub fn decode_output(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.output_tokens.get(i).cloned().unwrap_or_else(|| "<unk>".into()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            input: self.input_tokens.clone(),
            output: self.output_tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Vocabulary> {
        let f: VocabFile = serde_json::from_str(s)?;
        Vocabulary::from_tokens(f.input, f.output)
    }
}

/// Sorted, specials-first vocabulary over every sample of every dataset.
pub fn build_vocab(datasets: &[&[Sample]]) -> Result<Vocabulary> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let mut input = BTreeSet::new();
    let mut output = BTreeSet::new();
    for s in datasets.iter().flat_map(|d| d.iter()) {
        input.extend(s.source.iter().cloned());
        output.extend(s.target.iter().cloned());
    }
    Vocabulary::from_tokens(with_specials(input), with_specials(output))
}

pub fn write_dataset<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(w, "{}\t{}", s.source.join(" "), s.target.join(" "))?;
    }
    Ok(())
}

pub fn dataset_to_string(samples: &[Sample]) -> String {
    let mut buf = Vec::new();
    write_dataset(&mut buf, samples).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::MalformedInput {
            position: lineno,
            reason: "dataset line has no TAB".into(),
        })?;
        out.push(Sample {
            source: src.split_whitespace().map(String::from).collect(),
            target: tgt.split_whitespace().map(String::from).collect(),
        });
    }
    Ok(out)
}
