//! RASP-style programs and their compilation into transformer weights.
//!
//! Programs are DAGs of `tokens`, `indices`, elementwise `map`,
//! `select(keys, queries, predicate)` and `aggregate(selector, values)`.
//! All values are categorical; an aggregate yields the value of the single
//! selected key, or nothing when no key (or several disagreeing keys) match.

mod compile;

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use compile::{
    all_inputs, compile, discover, extract_ground_truth, ground_truth_circuit, probe_alphabet, recovery_probes, recovery_spec,
    reference_config, validate_recovery,
    CompileConfig, CompiledModel, RecoveryReport, ATTENTION_SCALE, BOS_DEFAULT, OUTPUT_LOGIT,
};

use crate::error::{Error, Result};
use crate::grammar::OpKind;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Sym(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{}", i),
            Value::Sym(s) => f.write_str(s),
        }
    }
}

/// Comparison `key ∘ query` deciding whether a query attends to a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predicate {
    Eq,
    Neq,
    Lt,
    Leq,
    Gt,
    Geq,
    True,
    False,
}

impl Predicate {
    pub fn holds(self, key: &Value, query: &Value) -> bool {
        match self {
            Predicate::Eq => key == query,
            Predicate::Neq => key != query,
            Predicate::Lt => key < query,
            Predicate::Leq => key <= query,
            Predicate::Gt => key > query,
            Predicate::Geq => key >= query,
            Predicate::True => true,
            Predicate::False => false,
        }
    }
}

pub type MapFn = Rc<dyn Fn(&Value) -> Option<Value>>;

/// Handle to a sequence-valued node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SOp(usize);

/// Handle to a selector node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Selector(usize);

#[derive(Clone)]
pub(crate) enum Node {
    Tokens,
    Indices,
    Map { label: String, input: SOp, f: MapFn },
    Select { keys: SOp, queries: SOp, predicate: Predicate },
    Aggregate { label: String, selector: Selector, values: SOp },
}

/// A program over fixed-length inputs. Nodes are stored in creation order,
/// which is a topological order since operands must exist first.
#[derive(Clone)]
pub struct RaspProgram {
    pub name: String,
    /// Length of the user-visible input.
    pub seq_len: usize,
    /// Extra trailing input token for programs whose output is one longer.
    pub slot: Option<String>,
    nodes: Vec<Node>,
    output: Option<SOp>,
}

impl fmt::Debug for RaspProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RaspProgram")
            .field("name", &self.name)
            .field("seq_len", &self.seq_len)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl RaspProgram {
    pub fn new(name: &str, seq_len: usize) -> RaspProgram {
        RaspProgram {
            name: name.to_string(),
            seq_len,
            slot: None,
            nodes: Vec::new(),
            output: None,
        }
    }

    fn push(&mut self, n: Node) -> usize {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn check_sop(&self, s: SOp) -> Result<()> {
        match self.nodes.get(s.0) {
            Some(Node::Select { .. }) | None => Err(Error::InvalidConfig(format!("node {} is not a sequence", s.0))),
            _ => Ok(()),
        }
    }

    pub fn tokens(&mut self) -> SOp {
        SOp(self.push(Node::Tokens))
    }

    pub fn indices(&mut self) -> SOp {
        SOp(self.push(Node::Indices))
    }

    pub fn map(&mut self, label: &str, input: SOp, f: impl Fn(&Value) -> Option<Value> + 'static) -> Result<SOp> {
        self.check_sop(input)?;
        Ok(SOp(self.push(Node::Map {
            label: label.to_string(),
            input,
            f: Rc::new(f),
        })))
    }

    pub fn select(&mut self, keys: SOp, queries: SOp, predicate: Predicate) -> Result<Selector> {
        self.check_sop(keys)?;
        self.check_sop(queries)?;
        Ok(Selector(self.push(Node::Select { keys, queries, predicate })))
    }

    pub fn aggregate(&mut self, label: &str, selector: Selector, values: SOp) -> Result<SOp> {
        if !matches!(self.nodes.get(selector.0), Some(Node::Select { .. })) {
            return Err(Error::InvalidConfig(format!("node {} is not a selector", selector.0)));
        }
        self.check_sop(values)?;
        Ok(SOp(self.push(Node::Aggregate {
            label: label.to_string(),
            selector,
            values,
        })))
    }

    pub fn set_output(&mut self, s: SOp) -> Result<()> {
        self.check_sop(s)?;
        self.output = Some(s);
        Ok(())
    }

    pub fn output(&self) -> Result<SOp> {
        self.output.ok_or_else(|| Error::InvalidConfig(format!("program `{}` has no output", self.name)))
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Number of input positions the program runs on.
    pub fn input_len(&self) -> usize {
        self.seq_len + usize::from(self.slot.is_some())
    }

    /// Appends the slot token, if any, to a user input.
    pub fn prepare<S: AsRef<str>>(&self, x: &[S]) -> Vec<String> {
        let mut v: Vec<String> = x.iter().map(|s| s.as_ref().to_string()).collect();
        v.extend(self.slot.clone());
        v
    }

    /// Values of every node at every position of a prepared input.
    fn evaluate_all(&self, input: &[String]) -> Result<Vec<Vec<Option<Value>>>> {
        if input.len() != self.input_len() {
            return Err(Error::MalformedInput {
                position: input.len().min(self.input_len()),
                reason: format!("program `{}` takes {} tokens, got {}", self.name, self.input_len(), input.len()),
            });
        }
        let n = input.len();
        let mut vals: Vec<Vec<Option<Value>>> = Vec::with_capacity(self.nodes.len());
        let mut sels: Vec<Option<Vec<Vec<bool>>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (v, s) = match node {
                Node::Tokens => (input.iter().map(|t| Some(Value::Sym(t.clone()))).collect(), None),
                Node::Indices => ((0..n).map(|i| Some(Value::Int(i as i64))).collect(), None),
                Node::Map { input, f, .. } => (vals[input.0].iter().map(|x| x.as_ref().and_then(|x| f(x))).collect(), None),
                Node::Select { keys, queries, predicate } => {
                    let m = (0..n)
                        .map(|q| {
                            (0..n)
                                .map(|k| match (&vals[keys.0][k], &vals[queries.0][q]) {
                                    (Some(kv), Some(qv)) => predicate.holds(kv, qv),
                                    _ => false,
                                })
                                .collect()
                        })
                        .collect();
                    (Vec::new(), Some(m))
                }
                Node::Aggregate { selector, values, .. } => {
                    let m = sels[selector.0].as_ref().expect("selector");
                    let out = (0..n)
                        .map(|q| {
                            let picked: BTreeSet<&Value> = (0..n)
                                .filter(|&k| m[q][k])
                                .filter_map(|k| vals[values.0][k].as_ref())
                                .collect();
                            let selected = m[q].iter().filter(|b| **b).count();
                            (picked.len() == 1 && selected >= 1).then(|| (*picked.iter().next().unwrap()).clone())
                        })
                        .collect();
                    (out, None)
                }
            };
            vals.push(v);
            sels.push(s);
        }
        Ok(vals)
    }

    /// Output values per position of a prepared input.
    pub fn interpret(&self, input: &[String]) -> Result<Vec<Option<Value>>> {
        let out = self.output()?;
        Ok(self.evaluate_all(input)?.swap_remove(out.0))
    }

    /// Runs on a user input; every position must produce a symbol.
    pub fn run<S: AsRef<str>>(&self, x: &[S]) -> Result<Vec<String>> {
        self.interpret(&self.prepare(x))?
            .into_iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(Value::Sym(s)) => Ok(s),
                other => Err(Error::MalformedInput {
                    position: i,
                    reason: format!("program `{}` produced {:?}", self.name, other),
                }),
            })
            .collect()
    }
}

/// Token placed after the input of programs that lengthen it by one.
pub const SLOT: &str = "<slot>";

fn index_map(p: &mut RaspProgram, label: &str, f: impl Fn(i64) -> i64 + 'static) -> Result<SOp> {
    let idx = p.indices();
    p.map(label, idx, move |v| match v {
        Value::Int(i) => Some(Value::Int(f(*i))),
        _ => None,
    })
}

/// Program for one of the unary operations copy, reverse, echo, swap.
pub fn build_program(task: OpKind, seq_len: usize) -> Result<RaspProgram> {
    if seq_len == 0 {
        return Err(Error::InvalidConfig("sequence length must be positive".into()));
    }
    let n = seq_len as i64;
    let mut p = RaspProgram::new(task.name(), seq_len);
    let source = match task {
        OpKind::Copy => p.indices(),
        OpKind::Reverse => index_map(&mut p, "reverse_index", move |i| n - 1 - i)?,
        OpKind::Swap => index_map(&mut p, "swap_index", move |i| {
            if i == 0 {
                n - 1
            } else if i == n - 1 {
                0
            } else {
                i
            }
        })?,
        OpKind::Echo => {
            p.slot = Some(SLOT.to_string());
            index_map(&mut p, "echo_index", move |i| i.min(n - 1))?
        }
        other => return Err(Error::UnsupportedTask(other.name().to_string())),
    };
    let keys = p.indices();
    let tokens = p.tokens();
    let sel = p.select(keys, source, Predicate::Eq)?;
    let out = p.aggregate(task.name(), sel, tokens)?;
    p.set_output(out)?;
    Ok(p)
}

#[cfg(test)]
mod tests;
