//! The pipeline stages. Each stage derives its key from the config and the
//! keys of its inputs, so every stage can locate its inputs without state
//! beyond the workspace itself, and rerunning a finished stage is a no-op.

use std::collections::BTreeMap;
use std::time::Instant;

use circomp::compose::{evaluate_composite_grid, union};
use circomp::eval::{
    differing_for_samples, evaluate, metrics_csv, overlap, sparsity, sparsity_csv, MetricRecord, OverlapRecord,
    SparsityReport,
};
use circomp::grammar::{build_vocab, dataset_to_string, gen_isolated, read_dataset, OpKind, Sample, Vocabulary};
use circomp::masking::{
    binarize, compute_mean_ablation, train_mask, AblationKind, AblationSpec, Circuit, MaskParams, OutputCache,
    TrainSpec,
};
use circomp::model::{train_base, EncodedSample, ModelConfig, TransformerModel};
use circomp::raspc::{
    build_program, compile, discover, extract_ground_truth, probe_alphabet, recovery_probes, recovery_spec,
    reference_config, validate_recovery, RecoveryReport,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{derive_seed, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::workspace::{stage_key, Artifact, Pending, Workspace};

/// Subcommand that produces each artifact kind.
pub const STAGES: [(&str, &str); 11] = [
    ("data", "gen-data"),
    ("base", "train-base"),
    ("cache", "cache-outputs"),
    ("means", "compute-means"),
    ("masks", "train-mask"),
    ("eval", "eval"),
    ("overlap", "overlap"),
    ("sparsity", "sparsity"),
    ("compose", "compose"),
    ("tracr", "tracr-validate"),
    ("report", "report"),
];

pub fn producer(stage: &str) -> &'static str {
    STAGES
        .iter()
        .find(|(s, _)| *s == stage)
        .map(|(_, p)| *p)
        .expect("known stage")
}

/// Result of running one stage.
#[derive(Debug)]
pub struct Outcome {
    pub stage: &'static str,
    pub key: String,
    /// `false` when the artifact already existed.
    pub ran: bool,
    pub seconds: f64,
}

/// Circuit label used for the unmasked model in metric tables.
pub const FULL: &str = "full";

/// One circuit of the λ sweep, evaluated on its own task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub task: String,
    pub lambda: f64,
    pub f_t: f64,
    pub kl: f64,
    pub accuracy: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracrRow {
    pub seed: u64,
    /// Greedy accuracy of the compiled model itself on the task.
    pub compiled_accuracy: f64,
    #[serde(flatten)]
    pub report: RecoveryReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracrSummary {
    pub rows: Vec<TracrRow>,
    /// Per task: every seed produced the same mask.
    pub seed_agreement: BTreeMap<String, bool>,
}

pub(crate) fn sweep_name(task: OpKind, lambda: f64) -> String {
    format!("sweep/{}-lambda-{:e}.circuit.json", task, lambda)
}

pub(crate) fn circuit_name(task: OpKind) -> String {
    format!("{}.circuit.json", task)
}

fn json_of<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn inputs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

/// Decoded datasets of the `data` artifact.
pub struct Datasets {
    pub vocab: Vocabulary,
    pub train: BTreeMap<OpKind, Vec<Sample>>,
    pub val: BTreeMap<OpKind, Vec<Sample>>,
}

impl Datasets {
    pub fn encode(&self, samples: &[Sample]) -> Result<Vec<EncodedSample>> {
        samples
            .iter()
            .map(|s| {
                Ok(EncodedSample {
                    src: self.vocab.encode_source(&s.source)?,
                    tgt: self.vocab.encode_target(&s.target)?,
                })
            })
            .collect()
    }

    pub fn train_enc(&self, task: OpKind) -> Result<Vec<EncodedSample>> {
        self.encode(&self.train[&task])
    }

    pub fn val_enc(&self, task: OpKind) -> Result<Vec<EncodedSample>> {
        self.encode(&self.val[&task])
    }
}

pub struct Pipeline<'a> {
    pub cfg: ExperimentConfig,
    pub ws: &'a Workspace,
    pub verbose: bool,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: ExperimentConfig, ws: &'a Workspace) -> Pipeline<'a> {
        Pipeline { cfg, ws, verbose: true }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    // ---- keys -------------------------------------------------------------

    fn data_params(&self) -> serde_json::Value {
        let mut gen = self.cfg.gen.clone();
        gen.seed = derive_seed(self.cfg.seed, "data");
        json!({ "tasks": self.cfg.tasks, "gen": gen })
    }

    pub fn data_key(&self) -> String {
        stage_key("data", &self.data_params(), &BTreeMap::new())
    }

    fn base_params(&self) -> serde_json::Value {
        let mut spec = self.cfg.base.clone();
        spec.seed = derive_seed(self.cfg.seed, "base");
        json!({ "model": self.cfg.model, "train": spec, "init_seed": derive_seed(self.cfg.seed, "init") })
    }

    fn base_inputs(&self) -> BTreeMap<String, String> {
        inputs(&[("data", &self.data_key())])
    }

    pub fn base_key(&self) -> String {
        stage_key("base", &self.base_params(), &self.base_inputs())
    }

    /// Tasks that need caches, means and masks.
    pub fn mask_tasks(&self) -> Vec<OpKind> {
        let mut t = self.cfg.circuits.clone();
        if let Some(s) = &self.cfg.sensitivity {
            if !t.contains(&s.task) {
                t.push(s.task);
            }
        }
        t
    }

    fn model_inputs(&self) -> BTreeMap<String, String> {
        inputs(&[("data", &self.data_key()), ("base", &self.base_key())])
    }

    pub fn cache_key(&self) -> String {
        stage_key("cache", &json!({ "tasks": self.mask_tasks() }), &self.model_inputs())
    }

    pub fn means_key(&self) -> String {
        stage_key(
            "means",
            &json!({ "tasks": self.mask_tasks(), "ablation": self.cfg.ablation }),
            &self.model_inputs(),
        )
    }

    /// Full mask-training spec (with seed) for a task.
    pub fn mask_spec(&self, task: OpKind) -> TrainSpec {
        let mut s = self.cfg.mask_spec(task);
        s.seed = derive_seed(self.cfg.seed, &format!("mask:{}", task));
        s
    }

    fn sweep_specs(&self) -> Vec<(OpKind, f64, TrainSpec)> {
        match &self.cfg.sensitivity {
            None => Vec::new(),
            Some(s) => s
                .lambdas
                .iter()
                .map(|&l| {
                    let mut spec = self.mask_spec(s.task);
                    spec.lambda = l;
                    (s.task, l, spec)
                })
                .collect(),
        }
    }

    fn masks_params(&self) -> serde_json::Value {
        let specs: BTreeMap<String, TrainSpec> = self
            .cfg
            .circuits
            .iter()
            .map(|t| (t.to_string(), self.mask_spec(*t)))
            .collect();
        json!({
            "ablation": self.cfg.ablation,
            "circuits": specs,
            "sweep": self.sweep_specs().iter().map(|(t, l, s)| json!({"task": t, "lambda": l, "spec": s})).collect::<Vec<_>>(),
        })
    }

    fn masks_inputs(&self) -> BTreeMap<String, String> {
        inputs(&[
            ("data", &self.data_key()),
            ("base", &self.base_key()),
            ("cache", &self.cache_key()),
            ("means", &self.means_key()),
        ])
    }

    pub fn masks_key(&self) -> String {
        stage_key("masks", &self.masks_params(), &self.masks_inputs())
    }

    fn analysis_inputs(&self) -> BTreeMap<String, String> {
        inputs(&[
            ("data", &self.data_key()),
            ("base", &self.base_key()),
            ("masks", &self.masks_key()),
        ])
    }

    pub fn eval_key(&self) -> String {
        stage_key(
            "eval",
            &json!({ "batch": self.cfg.eval_batch, "tasks": self.cfg.tasks, "circuits": self.cfg.circuits }),
            &self.analysis_inputs(),
        )
    }

    pub fn overlap_key(&self) -> String {
        stage_key(
            "overlap",
            &json!({ "circuits": self.cfg.circuits }),
            &inputs(&[("base", &self.base_key()), ("masks", &self.masks_key())]),
        )
    }

    pub fn sparsity_key(&self) -> String {
        stage_key(
            "sparsity",
            &json!({ "circuits": self.cfg.circuits }),
            &inputs(&[("base", &self.base_key()), ("masks", &self.masks_key())]),
        )
    }

    pub fn compose_key(&self) -> String {
        stage_key(
            "compose",
            &json!({ "pairs": self.cfg.compose, "batch": self.cfg.eval_batch, "tasks": self.cfg.tasks }),
            &self.analysis_inputs(),
        )
    }

    pub fn tracr_key(&self) -> String {
        stage_key("tracr", &json_of(&self.cfg.tracr), &BTreeMap::new())
    }

    pub fn report_inputs(&self) -> BTreeMap<String, String> {
        let mut i = inputs(&[
            ("base", &self.base_key()),
            ("masks", &self.masks_key()),
            ("eval", &self.eval_key()),
            ("overlap", &self.overlap_key()),
            ("sparsity", &self.sparsity_key()),
        ]);
        if !self.cfg.compose.is_empty() {
            i.insert("compose".into(), self.compose_key());
        }
        if !self.cfg.tracr.tasks.is_empty() {
            i.insert("tracr".into(), self.tracr_key());
        }
        i
    }

    pub fn report_key(&self) -> String {
        stage_key(
            "report",
            &json!({ "tasks": self.cfg.tasks, "circuits": self.cfg.circuits, "emergence": self.cfg.emergence }),
            &self.report_inputs(),
        )
    }

    /// `(stage, key)` for every stage the config enables.
    pub fn keys(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("data", self.data_key()),
            ("base", self.base_key()),
            ("cache", self.cache_key()),
            ("means", self.means_key()),
            ("masks", self.masks_key()),
            ("eval", self.eval_key()),
            ("overlap", self.overlap_key()),
            ("sparsity", self.sparsity_key()),
        ];
        if !self.cfg.compose.is_empty() {
            v.push(("compose", self.compose_key()));
        }
        if !self.cfg.tracr.tasks.is_empty() {
            v.push(("tracr", self.tracr_key()));
        }
        v.push(("report", self.report_key()));
        v
    }

    // ---- artifact access --------------------------------------------------

    pub fn open(&self, stage: &str, key: &str) -> Result<Artifact> {
        self.ws.open_artifact(stage, key, producer(stage))
    }

    pub fn load_data(&self) -> Result<Datasets> {
        let a = self.open("data", &self.data_key())?;
        let vocab = Vocabulary::from_json(&a.read_string("vocab.json")?)?;
        let mut train = BTreeMap::new();
        let mut val = BTreeMap::new();
        for &t in &self.cfg.tasks {
            train.insert(t, read_dataset(&a.read(&format!("{}.train.tsv", t))?[..])?);
            val.insert(t, read_dataset(&a.read(&format!("{}.val.tsv", t))?[..])?);
        }
        Ok(Datasets { vocab, train, val })
    }

    pub fn load_model(&self) -> Result<TransformerModel<f32>> {
        let a = self.open("base", &self.base_key())?;
        a.expect_input("data", &self.data_key())?;
        let (model, _) = TransformerModel::from_checkpoint_bytes(&a.read("model.ckpt")?)?;
        let info: serde_json::Value = a.read_json("model.json")?;
        if info["model_hash"].as_str() != Some(model.hash().as_str()) {
            return Err(CliError::HashMismatch(format!(
                "model checkpoint in {} does not match its recorded hash",
                a.dir.display()
            )));
        }
        Ok(model)
    }

    fn read_circuit(a: &Artifact, name: &str) -> Result<Circuit> {
        let json = a.read_string(name)?;
        let prefix = name.rsplit_once('/').map(|(d, _)| format!("{}/", d)).unwrap_or_default();
        let mut err = None;
        let c = Circuit::from_files(&json, |mean| {
            a.read(&format!("{}{}", prefix, mean)).map_err(|e| {
                let msg = e.to_string();
                err = Some(e);
                circomp::error::Error::Format(msg)
            })
        });
        match (c, err) {
            (Ok(c), _) => Ok(c),
            (Err(_), Some(e)) => Err(e),
            (Err(e), None) => Err(e.into()),
        }
    }

    /// Self-task circuits in config order.
    pub fn load_circuits(&self) -> Result<Vec<(OpKind, Circuit)>> {
        let a = self.open("masks", &self.masks_key())?;
        a.expect_input("base", &self.base_key())?;
        self.cfg
            .circuits
            .iter()
            .map(|&t| Ok((t, Self::read_circuit(&a, &circuit_name(t))?)))
            .collect()
    }

    fn load_sweep(&self) -> Result<Vec<(OpKind, f64, Circuit)>> {
        let a = self.open("masks", &self.masks_key())?;
        self.sweep_specs()
            .into_iter()
            .map(|(t, l, _)| Ok((t, l, Self::read_circuit(&a, &sweep_name(t, l))?)))
            .collect()
    }

    fn begin(&self, stage: &str, key: &str, inputs: BTreeMap<String, String>, params: serde_json::Value) -> Result<Pending> {
        self.ws.begin(stage, key, inputs, params)
    }

    /// Runs `body` unless the artifact already exists.
    fn stage(
        &self,
        stage: &'static str,
        key: String,
        body: impl FnOnce(&Self, &str) -> Result<()>,
    ) -> Result<Outcome> {
        let name = producer(stage);
        if self.ws.exists(stage, &key) {
            self.log(format!("{}: up to date ({}/{})", name, stage, key));
            return Ok(Outcome {
                stage,
                key,
                ran: false,
                seconds: 0.0,
            });
        }
        let t = Instant::now();
        body(self, &key)?;
        let seconds = t.elapsed().as_secs_f64();
        self.log(format!("{}: wrote {}/{} in {:.1}s", name, stage, key, seconds));
        Ok(Outcome {
            stage,
            key,
            ran: true,
            seconds,
        })
    }

    // ---- stages -----------------------------------------------------------

    pub fn gen_data(&self) -> Result<Outcome> {
        self.stage("data", self.data_key(), |p, key| {
            let params = p.data_params();
            let mut gen = p.cfg.gen.clone();
            gen.seed = derive_seed(p.cfg.seed, "data");
            let mut sets = Vec::new();
            for &t in &p.cfg.tasks {
                sets.push((t, gen_isolated(t, &gen)?));
            }
            let all: Vec<&[Sample]> = sets.iter().flat_map(|(_, (a, b))| [a.as_slice(), b.as_slice()]).collect();
            let vocab = build_vocab(&all)?;
            let mut out = p.begin("data", key, BTreeMap::new(), params)?;
            out.write("vocab.json", vocab.to_json().as_bytes())?;
            for (t, (train, val)) in &sets {
                out.write(&format!("{}.train.tsv", t), dataset_to_string(train).as_bytes())?;
                out.write(&format!("{}.val.tsv", t), dataset_to_string(val).as_bytes())?;
            }
            out.commit()?;
            Ok(())
        })
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        let m = &self.cfg.model;
        let mut c = ModelConfig::encoder_decoder(
            m.enc_layers,
            m.dec_layers,
            m.d_model,
            m.n_heads,
            m.ffn_hidden,
            m.max_len,
            vocab.input_size(),
            vocab.output_size(),
        );
        c.dropout = m.dropout;
        c
    }

    pub fn train_base(&self) -> Result<Outcome> {
        self.stage("base", self.base_key(), |p, key| {
            let data = p.load_data()?;
            let mut train = Vec::new();
            for &t in &p.cfg.tasks {
                train.extend(data.train_enc(t)?);
            }
            let cfg = p.model_config(&data.vocab);
            cfg.validate().map_err(CliError::from_core_as_config)?;
            let mut model = TransformerModel::<f32>::new(cfg, derive_seed(p.cfg.seed, "init"))?;
            let mut spec = p.cfg.base.clone();
            spec.seed = derive_seed(p.cfg.seed, "base");
            let epochs = spec.epochs;
            let reports = train_base(&mut model, &train, &spec, |r, _| {
                p.log(format!("train-base: epoch {}/{} loss {:.5}", r.epoch + 1, epochs, r.mean_loss));
                Ok(())
            })?;
            let mut out = p.begin("base", key, p.base_inputs(), p.base_params())?;
            out.write("model.ckpt", &model.to_checkpoint_bytes(json!({ "data": p.data_key() })))?;
            out.write_json("model.json", &json!({ "model_hash": model.hash(), "config": model.config }))?;
            out.write_json("train.json", &reports)?;
            out.commit()?;
            Ok(())
        })
    }

    pub fn cache_outputs(&self) -> Result<Outcome> {
        self.stage("cache", self.cache_key(), |p, key| {
            let data = p.load_data()?;
            let model = p.load_model()?;
            let mut out = p.begin("cache", key, p.model_inputs(), json!({ "tasks": p.mask_tasks() }))?;
            for t in p.mask_tasks() {
                let cache = OutputCache::build(&model, &data.train_enc(t)?, p.cfg.eval_batch)?;
                out.write(&format!("{}.cache", t), &cache.to_bytes())?;
            }
            out.commit()?;
            Ok(())
        })
    }

    pub fn compute_means(&self) -> Result<Outcome> {
        self.stage("means", self.means_key(), |p, key| {
            let params = json!({ "tasks": p.mask_tasks(), "ablation": p.cfg.ablation });
            let mut out = p.begin("means", key, p.model_inputs(), params)?;
            if p.cfg.ablation == AblationKind::Mean {
                let data = p.load_data()?;
                let model = p.load_model()?;
                for t in p.mask_tasks() {
                    let m = compute_mean_ablation(&model, &data.train_enc(t)?, p.cfg.eval_batch, t.name())?;
                    out.write(&format!("{}.mean.bin", t), &m.mean_bytes())?;
                }
            }
            out.commit()?;
            Ok(())
        })
    }

    fn ablation_for(&self, means: &Artifact, task: OpKind, n: usize) -> Result<AblationSpec> {
        match self.cfg.ablation {
            AblationKind::Zero => Ok(AblationSpec::zero(n)),
            AblationKind::Mean => Ok(AblationSpec::from_mean_bytes(&means.read(&format!("{}.mean.bin", task))?)?),
        }
    }

    pub fn train_masks(&self) -> Result<Outcome> {
        self.stage("masks", self.masks_key(), |p, key| {
            let data = p.load_data()?;
            let model = p.load_model()?;
            let caches = p.open("cache", &p.cache_key())?;
            caches.expect_input("base", &p.base_key())?;
            let means = p.open("means", &p.means_key())?;
            means.expect_input("base", &p.base_key())?;
            let n = model.site_map().len();
            let mut out = p.begin("masks", key, p.masks_inputs(), p.masks_params())?;
            let mut trained: Vec<(OpKind, TrainSpec, Circuit)> = Vec::new();
            let mut jobs: Vec<(OpKind, TrainSpec, String)> = p
                .cfg
                .circuits
                .iter()
                .map(|&t| (t, p.mask_spec(t), circuit_name(t)))
                .collect();
            jobs.extend(p.sweep_specs().into_iter().map(|(t, l, s)| (t, s, sweep_name(t, l))));
            for (task, spec, file) in jobs {
                let circuit = match trained.iter().find(|(t, s, _)| *t == task && *s == spec) {
                    Some((_, _, c)) => c.clone(),
                    None => {
                        let t0 = Instant::now();
                        let train = data.train_enc(task)?;
                        let cache = OutputCache::from_bytes(&caches.read(&format!("{}.cache", task))?)?;
                        let ablation = p.ablation_for(&means, task, n)?;
                        let params: MaskParams = train_mask(&model, &train, &cache, &ablation, &spec)?;
                        let c = Circuit {
                            mask: binarize(&params.s),
                            ablation,
                            task: task.name().to_string(),
                            model_hash: model.hash(),
                            site_map: model.site_map().descriptor(),
                            train_spec: Some(spec.clone()),
                            composition: None,
                        };
                        p.log(format!(
                            "train-mask: {} (lambda {:e}) kept {}/{} sites in {:.1}s",
                            task,
                            spec.lambda,
                            c.active(),
                            n,
                            t0.elapsed().as_secs_f64()
                        ));
                        out.write_json(&file.replace(".circuit.json", ".history.json"), &params.history)?;
                        trained.push((task, spec.clone(), c.clone()));
                        c
                    }
                };
                write_circuit(&mut out, &file, &circuit)?;
            }
            out.commit()?;
            Ok(())
        })
    }

    pub fn eval(&self) -> Result<Outcome> {
        self.stage("eval", self.eval_key(), |p, key| {
            let data = p.load_data()?;
            let model = p.load_model()?;
            let circuits = p.load_circuits()?;
            let bs = p.cfg.eval_batch;
            let n = model.site_map().len();
            let mut records: Vec<MetricRecord> = Vec::new();
            let full = Circuit {
                mask: vec![true; n],
                ablation: AblationSpec::zero(n),
                task: FULL.to_string(),
                model_hash: model.hash(),
                site_map: model.site_map().descriptor(),
                train_spec: None,
                composition: None,
            };
            for &t in &p.cfg.tasks {
                records.push(evaluate(&model, &full, t.name(), &data.val_enc(t)?, None, bs)?);
            }
            for (ct, c) in &circuits {
                for &t in &p.cfg.tasks {
                    let val = data.val_enc(t)?;
                    records.push(evaluate(&model, c, t.name(), &val, None, bs)?);
                    let positions = differing_for_samples(*ct, &data.val[&t])?;
                    match evaluate(&model, c, t.name(), &val, Some(&positions), bs) {
                        Ok(r) => records.push(r),
                        Err(circomp::error::Error::EmptyScope { .. }) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            let mut sens = Vec::new();
            for (t, lambda, c) in p.load_sweep()? {
                let r = evaluate(&model, &c, t.name(), &data.val_enc(t)?, None, bs)?;
                sens.push(SensitivityRow {
                    task: t.to_string(),
                    lambda,
                    f_t: r.f_t,
                    kl: r.kl,
                    accuracy: r.accuracy,
                    sparsity: sparsity(&c.mask, &model.site_map())?.global,
                });
            }
            let params = json!({ "batch": bs, "tasks": p.cfg.tasks, "circuits": p.cfg.circuits });
            let mut out = p.begin("eval", key, p.analysis_inputs(), params)?;
            out.write("metrics.csv", metrics_csv(&records)?.as_bytes())?;
            out.write_json("metrics.json", &records)?;
            out.write_json("sensitivity.json", &sens)?;
            out.commit()?;
            Ok(())
        })
    }

    pub fn overlap(&self) -> Result<Outcome> {
        self.stage("overlap", self.overlap_key(), |p, key| {
            let circuits = p.load_circuits()?;
            let mut rows: Vec<OverlapRecord> = Vec::new();
            for (_, a) in &circuits {
                for (_, b) in &circuits {
                    rows.push(overlap(a, b)?);
                }
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["a", "b", "iou", "iom"])?;
            for r in &rows {
                w.write_record([r.a.clone(), r.b.clone(), format!("{:.6}", r.iou), format!("{:.6}", r.iom)])?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
            let i = inputs(&[("base", &p.base_key()), ("masks", &p.masks_key())]);
            let mut out = p.begin("overlap", key, i, json!({ "circuits": p.cfg.circuits }))?;
            out.write("overlap.csv", &bytes)?;
            out.write_json("overlap.json", &rows)?;
            out.commit()?;
            Ok(())
        })
    }

    pub fn sparsity(&self) -> Result<Outcome> {
        self.stage("sparsity", self.sparsity_key(), |p, key| {
            let model = p.load_model()?;
            let map = model.site_map();
            let reports: Vec<(String, SparsityReport)> = p
                .load_circuits()?
                .iter()
                .map(|(t, c)| Ok((t.to_string(), sparsity(&c.mask, &map)?)))
                .collect::<Result<_>>()?;
            let i = inputs(&[("base", &p.base_key()), ("masks", &p.masks_key())]);
            let mut out = p.begin("sparsity", key, i, json!({ "circuits": p.cfg.circuits }))?;
            out.write("sparsity.csv", sparsity_csv(&reports)?.as_bytes())?;
            out.write_json("sparsity.json", &reports)?;
            out.commit()?;
            Ok(())
        })
    }

    pub fn compose(&self) -> Result<Outcome> {
        self.stage("compose", self.compose_key(), |p, key| {
            let data = p.load_data()?;
            let model = p.load_model()?;
            let circuits = p.load_circuits()?;
            let find = |t: OpKind| &circuits.iter().find(|(c, _)| *c == t).expect("validated pair").1;
            let pairs: Vec<(&Circuit, &Circuit)> = p.cfg.compose.iter().map(|&(a, b)| (find(a), find(b))).collect();
            let tasks: Vec<(String, Vec<EncodedSample>)> = p
                .cfg
                .tasks
                .iter()
                .map(|&t| Ok((t.to_string(), data.val_enc(t)?)))
                .collect::<Result<_>>()?;
            let grid = evaluate_composite_grid(&model, &pairs, &tasks, p.cfg.eval_batch)?;
            let params = json!({ "pairs": p.cfg.compose, "batch": p.cfg.eval_batch, "tasks": p.cfg.tasks });
            let mut out = p.begin("compose", key, p.analysis_inputs(), params)?;
            out.write("grid.csv", grid.to_csv()?.as_bytes())?;
            out.write_json("grid.json", &grid)?;
            for (a, b) in &pairs {
                for (x, y) in [(a, b), (b, a)] {
                    let u = union(x, y)?;
                    write_circuit(&mut out, &format!("{}.circuit.json", u.task), &u)?;
                }
            }
            out.commit()?;
            Ok(())
        })
    }

    pub fn tracr_validate(&self) -> Result<Outcome> {
        self.stage("tracr", self.tracr_key(), |p, key| {
            let mut out = p.begin("tracr", key, BTreeMap::new(), json_of(&p.cfg.tracr))?;
            let mut rows = Vec::new();
            let mut agreement = BTreeMap::new();
            for &task in &p.cfg.tracr.tasks {
                let program = build_program(task, 4)?;
                let compiled = compile(&program, &probe_alphabet(4), reference_config(task)?)?;
                let probes = recovery_probes(&compiled, task)?;
                let truth = extract_ground_truth(&compiled, &probes)?;
                let srcs: Vec<&[usize]> = probes.iter().map(|s| s.src.as_slice()).collect();
                let decoded = compiled.model.greedy_decode(&srcs, &circomp::model::NoHook)?;
                let correct = decoded.iter().zip(&probes).filter(|(o, s)| **o == s.tgt).count();
                let compiled_accuracy = correct as f64 / probes.len() as f64;
                let ckpt = format!("{}.ckpt", task);
                compiled.save(&out.dir().join(&ckpt))?;
                out.adopt(&ckpt)?;
                out.adopt(&format!("{}.labels.json", ckpt))?;
                let mut masks: Vec<Vec<bool>> = Vec::new();
                for &seed in &p.cfg.tracr.seeds {
                    let t0 = Instant::now();
                    let found = discover(&compiled, &probes, &recovery_spec(task, seed))?;
                    let report = validate_recovery(&compiled, &found, &truth, &probes)?;
                    let seconds = t0.elapsed().as_secs_f64();
                    p.log(format!(
                        "tracr-validate: {} seed {} IoU {:.4} F_T {:.6} {} ({:.1}s)",
                        task,
                        seed,
                        report.iou,
                        report.f_t,
                        if report.pass { "pass" } else { "FAIL" },
                        seconds
                    ));
                    write_circuit(&mut out, &format!("{}-seed{}.circuit.json", task, seed), &found)?;
                    masks.push(found.mask.clone());
                    rows.push(TracrRow {
                        seed,
                        compiled_accuracy,
                        report,
                        seconds,
                    });
                }
                agreement.insert(task.to_string(), masks.windows(2).all(|w| w[0] == w[1]));
            }
            let summary = TracrSummary {
                rows,
                seed_agreement: agreement,
            };
            out.write_json("tracr.json", &summary)?;
            out.commit()?;
            Ok(())
        })
    }

    /// Every stage in dependency order.
    pub fn run_all(&self) -> Result<Vec<Outcome>> {
        let mut v = vec![
            self.gen_data()?,
            self.train_base()?,
            self.cache_outputs()?,
            self.compute_means()?,
            self.train_masks()?,
            self.eval()?,
            self.overlap()?,
            self.sparsity()?,
        ];
        if !self.cfg.compose.is_empty() {
            v.push(self.compose()?);
        }
        if !self.cfg.tracr.tasks.is_empty() {
            v.push(self.tracr_validate()?);
        }
        v.push(self.report()?);
        Ok(v)
    }
}

fn write_circuit(out: &mut Pending, name: &str, c: &Circuit) -> Result<()> {
    let (json, mean) = c.to_files();
    if let Some((mean_name, bytes)) = mean {
        let path = match name.rsplit_once('/') {
            Some((dir, _)) => format!("{}/{}", dir, mean_name),
            None => mean_name,
        };
        out.write(&path, &bytes)?;
    }
    out.write(name, json.as_bytes())
}
