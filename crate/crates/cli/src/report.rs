//! The `report` stage: heatmaps, sparsity and sensitivity tables, the
//! composition grid and a JSON summary, all built from finished artifacts
//! that must share one provenance chain.

use std::collections::BTreeMap;

use circomp::compose::CompositeGrid;
use circomp::eval::{Heatmap, MetricRecord, OverlapRecord, Scope, SparsityReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::pipeline::{Outcome, Pipeline, SensitivityRow, TracrSummary, FULL};
use crate::workspace::Artifact;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTask {
    pub task: String,
    pub f_t: f64,
    pub accuracy: f64,
    pub sparsity: f64,
}

/// Whether a union circuit does better on a task than either parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emergence {
    pub union: String,
    pub task: String,
    pub union_accuracy: f64,
    /// Accuracy of the union with the parents swapped.
    pub reversed_accuracy: f64,
    pub parent_accuracy: BTreeMap<String, f64>,
    /// `union_accuracy − max(parent accuracies)`.
    pub margin: f64,
    /// Margin of at least 10 percentage points.
    pub met: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Stage name → artifact key the report was built from.
    pub provenance: BTreeMap<String, String>,
    pub base_accuracy: BTreeMap<String, f64>,
    pub self_task: Vec<SelfTask>,
    pub sensitivity: Vec<SensitivityRow>,
    pub emergence: Option<Emergence>,
    pub tracr_pass: Option<bool>,
}

fn check_chain(a: &Artifact, expected: &BTreeMap<String, String>) -> Result<()> {
    for (name, key) in &a.manifest.inputs {
        if let Some(want) = expected.get(name) {
            if want != key {
                return Err(CliError::HashMismatch(format!(
                    "refusing mixed provenance: {} was built from {} {}, the report uses {}",
                    a.dir.display(),
                    name,
                    key,
                    want
                )));
            }
        }
    }
    a.verify()
}

fn matrix_csv(rows: &[String], cols: &[String], cell: impl Fn(&str, &str) -> Option<f64>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["circuit".to_string()];
    head.extend(cols.iter().cloned());
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.clone()];
        rec.extend(cols.iter().map(|c| cell(r, c).map(|v| format!("{:.6}", v)).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

impl Pipeline<'_> {
    pub fn report(&self) -> Result<Outcome> {
        self.stage_report()
    }

    fn stage_report(&self) -> Result<Outcome> {
        let key = self.report_key();
        if self.ws.exists("report", &key) {
            if self.verbose {
                eprintln!("report: up to date (report/{})", key);
            }
            return Ok(Outcome {
                stage: "report",
                key,
                ran: false,
                seconds: 0.0,
            });
        }
        let t0 = std::time::Instant::now();
        let expected = self.report_inputs();
        let chain = {
            let mut m = expected.clone();
            m.insert("data".into(), self.data_key());
            m
        };
        let eval = self.open("eval", &self.eval_key())?;
        check_chain(&eval, &chain)?;
        let overlap_a = self.open("overlap", &self.overlap_key())?;
        check_chain(&overlap_a, &chain)?;
        let sparsity_a = self.open("sparsity", &self.sparsity_key())?;
        check_chain(&sparsity_a, &chain)?;
        let compose_a = match expected.get("compose") {
            Some(k) => {
                let a = self.open("compose", k)?;
                check_chain(&a, &chain)?;
                Some(a)
            }
            None => None,
        };
        let tracr_a = match expected.get("tracr") {
            Some(k) => Some(self.open("tracr", k)?),
            None => None,
        };

        let records: Vec<MetricRecord> = eval.read_json("metrics.json")?;
        let sens: Vec<SensitivityRow> = eval.read_json("sensitivity.json")?;
        let overlaps: Vec<OverlapRecord> = overlap_a.read_json("overlap.json")?;
        let sparsities: Vec<(String, SparsityReport)> = sparsity_a.read_json("sparsity.json")?;
        let grid: Option<CompositeGrid> = compose_a.as_ref().map(|a| a.read_json("grid.json")).transpose()?;
        let tracr: Option<TracrSummary> = tracr_a.as_ref().map(|a| a.read_json("tracr.json")).transpose()?;

        let circuits: Vec<String> = self.cfg.circuits.iter().map(|t| t.to_string()).collect();
        let tasks: Vec<String> = self.cfg.tasks.iter().map(|t| t.to_string()).collect();
        let mut out = self.ws.begin("report", &key, expected.clone(), json!({ "tasks": tasks, "circuits": circuits }))?;

        let mut heatmaps = Vec::new();
        for metric in ["f_t", "accuracy", "kl", "jsd"] {
            for scope in [Scope::All, Scope::DifferingOnly] {
                let h = Heatmap::from_records(&records, metric, scope, &circuits, &tasks)?;
                out.write(&format!("heatmap_{}_{}.csv", metric, scope), h.to_csv()?.as_bytes())?;
                heatmaps.push(h);
            }
        }
        out.write_json("heatmaps.json", &heatmaps)?;

        let find_overlap = |a: &str, b: &str, iou: bool| {
            overlaps
                .iter()
                .find(|r| r.a == a && r.b == b)
                .map(|r| if iou { r.iou } else { r.iom })
        };
        out.write("overlap_iou.csv", matrix_csv(&circuits, &circuits, |a, b| find_overlap(a, b, true))?.as_bytes())?;
        out.write("overlap_iom.csv", matrix_csv(&circuits, &circuits, |a, b| find_overlap(a, b, false))?.as_bytes())?;
        out.write("sparsity.csv", &sparsity_a.read("sparsity.csv")?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "lambda", "f_t", "kl", "accuracy", "sparsity"])?;
        for r in &sens {
            w.write_record([
                r.task.clone(),
                format!("{:e}", r.lambda),
                format!("{:.6}", r.f_t),
                format!("{:.6}", r.kl),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.sparsity),
            ])?;
        }
        out.write("lambda_sensitivity.csv", &w.into_inner().map_err(|e| CliError::Io(e.into_error()))?)?;

        let base_accuracy: BTreeMap<String, f64> = records
            .iter()
            .filter(|r| r.circuit_task == FULL && r.scope == Scope::All)
            .map(|r| (r.eval_task.clone(), r.accuracy))
            .collect();
        let self_task: Vec<SelfTask> = circuits
            .iter()
            .map(|c| {
                let r = records
                    .iter()
                    .find(|r| r.circuit_task == *c && r.eval_task == *c && r.scope == Scope::All)
                    .ok_or_else(|| CliError::missing(format!("self-task metrics for {}", c), "eval"))?;
                let s = sparsities
                    .iter()
                    .find(|(t, _)| t == c)
                    .ok_or_else(|| CliError::missing(format!("sparsity of {}", c), "sparsity"))?;
                Ok(SelfTask {
                    task: c.clone(),
                    f_t: r.f_t,
                    accuracy: r.accuracy,
                    sparsity: s.1.global,
                })
            })
            .collect::<Result<_>>()?;

        let mut emergence = None;
        if let Some(g) = &grid {
            out.write("composition.csv", g.to_csv()?.as_bytes())?;
            if let Some((a, b, t)) = self.cfg.emergence {
                let (a, b, t) = (a.to_string(), b.to_string(), t.to_string());
                let name = format!("union({},{})", a, b);
                let reversed = format!("union({},{})", b, a);
                // Deduplicated grids may list an identical circuit under its first name.
                let get = |row: &str| g.get(row, &t);
                let union_accuracy = get(&name).or_else(|| get(&reversed)).unwrap_or(0.0);
                let reversed_accuracy = get(&reversed).unwrap_or(union_accuracy);
                let parents: BTreeMap<String, f64> =
                    [&a, &b].iter().map(|p| ((*p).clone(), get(p).unwrap_or(0.0))).collect();
                let best = parents.values().cloned().fold(f64::NEG_INFINITY, f64::max);
                let margin = union_accuracy - best;
                emergence = Some(Emergence {
                    union: name,
                    task: t,
                    union_accuracy,
                    reversed_accuracy,
                    parent_accuracy: parents,
                    margin,
                    met: margin >= 0.10,
                });
            }
        }

        let mut tracr_pass = None;
        if let Some(tr) = &tracr {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["task", "seed", "iou", "iom", "f_t", "accuracy", "compiled_accuracy", "pass"])?;
            for r in &tr.rows {
                w.write_record([
                    r.report.task.clone(),
                    r.seed.to_string(),
                    format!("{:.6}", r.report.iou),
                    format!("{:.6}", r.report.iom),
                    format!("{:.6}", r.report.f_t),
                    format!("{:.6}", r.report.accuracy),
                    format!("{:.6}", r.compiled_accuracy),
                    r.report.pass.to_string(),
                ])?;
            }
            out.write("tracr.csv", &w.into_inner().map_err(|e| CliError::Io(e.into_error()))?)?;
            tracr_pass = Some(tr.rows.iter().all(|r| r.report.pass));
        }

        let summary = Summary {
            provenance: chain,
            base_accuracy,
            self_task,
            sensitivity: sens,
            emergence,
            tracr_pass,
        };
        out.write_json("summary.json", &summary)?;
        out.commit()?;
        let seconds = t0.elapsed().as_secs_f64();
        if self.verbose {
            eprintln!("report: wrote report/{} in {:.1}s", key, seconds);
            if let Some(e) = &summary.emergence {
                if !e.met {
                    eprintln!(
                        "report: note: {} on {} beats its parents by {:+.1} points (< 10)",
                        e.union,
                        e.task,
                        100.0 * e.margin
                    );
                }
            }
        }
        Ok(Outcome {
            stage: "report",
            key,
            ran: true,
            seconds,
        })
    }
}
