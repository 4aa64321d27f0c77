//! Faithfulness, accuracy, overlap and sparsity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{eval_expr, parse_source, OpKind, Sample};
use crate::masking::Circuit;
use crate::model::{softmax_rows, EncodedSample, HardMask, Intervention, MediatorSiteMap, Module, NoHook, Stack, TransformerModel};
use crate::tensor::Real;

const DIST_TOL: f64 = 1e-6;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution("negative or non-finite entry".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("sums to {}", s)));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!("lengths {} and {}", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}

fn jsd_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = (kl_unchecked(p, &m) + kl_unchecked(q, &m)) / (2.0 * std::f64::consts::LN_2);
    v.clamp(0.0, 1.0)
}

/// `KL(p ‖ q)` in nats; infinite where `q` misses mass of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

/// Jensen-Shannon divergence normalised to `[0, 1]`.
pub fn jsd_norm(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    // Symmetric by construction: evaluate in a canonical argument order.
    Ok(if p <= q { jsd_unchecked(p, q) } else { jsd_unchecked(q, p) })
}

/// Per-position probability vectors over the output vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputDistribution {
    rows: Vec<Vec<f64>>,
}

impl OutputDistribution {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for r in &rows {
            check_distribution(r)?;
        }
        Ok(OutputDistribution { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    DifferingOnly,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::All => "all",
            Scope::DifferingOnly => "differing_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub circuit_task: String,
    pub eval_task: String,
    pub scope: Scope,
    pub f_t: f64,
    pub kl: f64,
    pub jsd: f64,
    pub accuracy: f64,
    /// Samples with at least one in-scope position.
    pub n_samples: usize,
    pub n_positions: usize,
}

/// Positions where two targets disagree once each is extended with EOS
/// and the shorter is padded with EOS.
pub fn differing_positions<S: PartialEq>(a: &[S], b: &[S]) -> Vec<usize> {
    (0..a.len().max(b.len())).filter(|&k| a.get(k) != b.get(k)).collect()
}

/// For each sample of an isolated task, the positions where `circuit_op`
/// applied to the same arguments would produce a different target.
pub fn differing_for_samples(circuit_op: OpKind, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| {
            let args = match parse_source(&s.source)? {
                crate::grammar::Expr::Apply(_, args) => args,
                leaf => vec![leaf],
            };
            if args.len() != circuit_op.arity() {
                return Err(Error::UnsupportedTask(format!(
                    "{} needs {} arguments, sample has {}",
                    circuit_op,
                    circuit_op.arity(),
                    args.len()
                )));
            }
            let values: Vec<Vec<String>> = args.iter().map(eval_expr).collect();
            Ok(differing_positions(&circuit_op.apply(&values), &s.target))
        })
        .collect()
}

/// Fraction of samples whose greedy decode equals the target exactly.
pub fn exact_match<T: Real>(
    model: &TransformerModel<T>,
    hook: &dyn Intervention<T>,
    data: &[EncodedSample],
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for chunk in data.chunks(batch_size.max(1)) {
        let srcs: Vec<&[usize]> = chunk.iter().map(|s| s.src.as_slice()).collect();
        let out = model.greedy_decode(&srcs, hook)?;
        correct += out.iter().zip(chunk).filter(|(o, s)| **o == s.tgt).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Teacher-forced faithfulness of `circuit` against the unmasked model on
/// `data`, plus greedy exact-match accuracy. `positions`, when given,
/// restricts the distribution metrics to those target positions per sample.
pub fn evaluate<T: Real>(
    model: &TransformerModel<T>,
    circuit: &Circuit,
    eval_task: &str,
    data: &[EncodedSample],
    positions: Option<&[Vec<usize>]>,
    batch_size: usize,
) -> Result<MetricRecord> {
    circuit.check_bound(model)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(p) = positions {
        if p.len() != data.len() {
            return Err(Error::InvalidConfig(format!("{} position sets for {} samples", p.len(), data.len())));
        }
    }
    let fill = circuit.ablation.fill::<T>();
    let hook = HardMask::new(&circuit.mask, &fill, model.config.d_model)?;
    let (mut jsd_sum, mut kl_sum, mut n_samples, mut n_positions) = (0.0, 0.0, 0usize, 0usize);
    let bs = batch_size.max(1);
    for (c, chunk) in data.chunks(bs).enumerate() {
        let refs: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = model.make_batch(&refs)?;
        let base = softmax_rows(&model.logits(&batch, &NoHook)?);
        let masked = softmax_rows(&model.logits(&batch, &hook)?);
        for i in 0..chunk.len() {
            let rows: Vec<usize> = (0..batch.tgt_len)
                .filter(|&r| batch.tgt_valid[i * batch.tgt_len + r])
                .filter(|r| positions.is_none_or(|p| p[c * bs + i].contains(r)))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let (mut j, mut k) = (0.0, 0.0);
            for &r in &rows {
                let (p, q) = (&base[i * batch.tgt_len + r], &masked[i * batch.tgt_len + r]);
                j += jsd_norm(p, q)?;
                k += kl_divergence(p, q)?;
            }
            jsd_sum += j / rows.len() as f64;
            kl_sum += k / rows.len() as f64;
            n_samples += 1;
            n_positions += rows.len();
        }
    }
    if n_samples == 0 {
        return Err(Error::EmptyScope {
            circuit_task: circuit.task.clone(),
            eval_task: eval_task.to_string(),
        });
    }
    let jsd = jsd_sum / n_samples as f64;
    Ok(MetricRecord {
        circuit_task: circuit.task.clone(),
        eval_task: eval_task.to_string(),
        scope: if positions.is_some() { Scope::DifferingOnly } else { Scope::All },
        f_t: 1.0 - jsd,
        kl: kl_sum / n_samples as f64,
        jsd,
        accuracy: exact_match(model, &hook, data, batch_size)?,
        n_samples,
        n_positions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub a: String,
    pub b: String,
    pub iou: f64,
    pub iom: f64,
}

/// `(IoU, IoM)` of two equal-length masks; empty denominators give 0.
pub fn mask_overlap(a: &[bool], b: &[bool]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::SiteMapMismatch(format!("masks of {} and {} sites", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    let min = a.iter().filter(|x| **x).count().min(b.iter().filter(|x| **x).count());
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok((ratio(inter, union), ratio(inter, min)))
}

pub fn overlap(c1: &Circuit, c2: &Circuit) -> Result<OverlapRecord> {
    if c1.site_map != c2.site_map {
        return Err(Error::SiteMapMismatch(format!("{} vs {}", c1.site_map, c2.site_map)));
    }
    let (iou, iom) = mask_overlap(&c1.mask, &c2.mask)?;
    Ok(OverlapRecord {
        a: c1.task.clone(),
        b: c2.task.clone(),
        iou,
        iom,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSparsity {
    pub stack: Stack,
    pub layer: usize,
    pub module: Module,
    pub kept: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// `Σm / N`.
    pub global: f64,
    pub modules: Vec<ModuleSparsity>,
}

pub fn sparsity(mask: &[bool], sites: &MediatorSiteMap) -> Result<SparsityReport> {
    if mask.len() != sites.len() {
        return Err(Error::SiteMapMismatch(format!("{} mask bits for {} sites", mask.len(), sites.len())));
    }
    let modules = sites
        .blocks()
        .iter()
        .enumerate()
        .map(|(b, &(stack, layer, module))| {
            let range = sites.block_range(b);
            let total = range.len();
            let kept = mask[range].iter().filter(|x| **x).count();
            ModuleSparsity {
                stack,
                layer,
                module,
                kept,
                total,
                fraction: kept as f64 / total as f64,
            }
        })
        .collect();
    let kept = mask.iter().filter(|x| **x).count();
    Ok(SparsityReport {
        global: if mask.is_empty() { 0.0 } else { kept as f64 / mask.len() as f64 },
        modules,
    })
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::Format(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// `circuit_task,eval_task,scope,f_t,kl,jsd,accuracy`.
pub fn metrics_csv(records: &[MetricRecord]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["circuit_task", "eval_task", "scope", "f_t", "kl", "jsd", "accuracy"])?;
        for r in records {
            w.write_record([
                r.circuit_task.clone(),
                r.eval_task.clone(),
                r.scope.to_string(),
                format!("{:.6}", r.f_t),
                format!("{:.6}", r.kl),
                format!("{:.6}", r.jsd),
                format!("{:.6}", r.accuracy),
            ])?;
        }
        Ok(())
    })
}

/// One row per (circuit, stack, layer, module).
pub fn sparsity_csv(reports: &[(String, SparsityReport)]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["circuit", "stack", "layer", "module", "kept", "total", "fraction"])?;
        for (name, rep) in reports {
            for m in &rep.modules {
                w.write_record([
                    name.clone(),
                    m.stack.to_string(),
                    m.layer.to_string(),
                    m.module.to_string(),
                    m.kept.to_string(),
                    m.total.to_string(),
                    format!("{:.6}", m.fraction),
                ])?;
            }
            w.write_record([name.as_str(), "all", "", "", "", "", &format!("{:.6}", rep.global)])?;
        }
        Ok(())
    })
}

/// Circuits × tasks matrix of one metric; missing cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub metric: String,
    pub scope: Scope,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    pub fn from_records(
        records: &[MetricRecord],
        metric: &str,
        scope: Scope,
        rows: &[String],
        cols: &[String],
    ) -> Result<Heatmap> {
        let pick = |r: &MetricRecord| -> Result<f64> {
            Ok(match metric {
                "f_t" => r.f_t,
                "kl" => r.kl,
                "jsd" => r.jsd,
                "accuracy" => r.accuracy,
                other => return Err(Error::InvalidConfig(format!("unknown metric `{}`", other))),
            })
        };
        let mut values = vec![vec![None; cols.len()]; rows.len()];
        for r in records.iter().filter(|r| r.scope == scope) {
            let i = rows.iter().position(|x| *x == r.circuit_task);
            let j = cols.iter().position(|x| *x == r.eval_task);
            if let (Some(i), Some(j)) = (i, j) {
                values[i][j] = Some(pick(r)?);
            }
        }
        Ok(Heatmap {
            metric: metric.to_string(),
            scope,
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            values,
        })
    }

    /// Matrix CSV with a leading `circuit` column; empty cells are blank.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(|w| {
            let mut head = vec!["circuit".to_string()];
            head.extend(self.cols.iter().cloned());
            w.write_record(&head)?;
            for (name, row) in self.rows.iter().zip(&self.values) {
                let mut rec = vec![name.clone()];
                rec.extend(row.iter().map(|v| v.map(|x| format!("{:.6}", x)).unwrap_or_default()));
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests;
