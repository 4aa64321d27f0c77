//! End-to-end runs of the pipeline on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::Command;

use circomp_cli::{CliError, ExperimentConfig, Pipeline, Workspace};

const TINY: &str = "
seed = 3
[data]
tasks = copy, reverse, echo
n_train = 40
n_val = 12
alphabet_size = 4
[model]
enc_layers = 1
dec_layers = 1
d_model = 16
n_heads = 2
ffn_hidden = 16
[base]
epochs = 2
[mask]
epochs = 3
lr = 0.01
batch_size = 8
[sensitivity]
task = copy
lambdas = 1e-2, 1e-6
[compose]
pairs = copy+reverse
emergence = copy+reverse:echo
[tracr]
tasks =
";

fn quiet(cfg: ExperimentConfig, ws: &Workspace) -> Pipeline<'_> {
    let mut p = Pipeline::new(cfg, ws);
    p.verbose = false;
    p
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_is_reproducible_and_cached() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ws1 = Workspace::open(d1.path()).unwrap();
    let p1 = quiet(cfg.clone(), &ws1);
    let first = p1.run_all().unwrap();
    assert!(first.iter().all(|o| o.ran));
    // Second invocation: every stage is a hash hit.
    assert!(p1.run_all().unwrap().iter().all(|o| !o.ran));

    let ws2 = Workspace::open(d2.path()).unwrap();
    quiet(cfg, &ws2).run_all().unwrap();
    for stage in ["masks", "eval", "compose", "report"] {
        assert_eq!(
            files_under(&d1.path().join(stage)),
            files_under(&d2.path().join(stage)),
            "{} differs between identical runs",
            stage
        );
    }
}

#[test]
fn seed_changes_every_key() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let d = tempfile::tempdir().unwrap();
    let ws = Workspace::open(d.path()).unwrap();
    let a = quiet(cfg.clone(), &ws).keys();
    let b = quiet(cfg.with_seed(4), &ws).keys();
    for ((s, ka), (_, kb)) in a.iter().zip(&b) {
        assert_ne!(ka, kb, "{} key ignores the seed", s);
    }
}

#[test]
fn missing_inputs_name_their_producer() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let d = tempfile::tempdir().unwrap();
    let ws = Workspace::open(d.path()).unwrap();
    let p = quiet(cfg, &ws);
    match p.report() {
        Err(CliError::MissingArtifact { stage, .. }) => assert_eq!(stage, "eval"),
        other => panic!("expected missing eval, got {:?}", other),
    }
    match p.train_masks() {
        Err(CliError::MissingArtifact { stage, .. }) => assert_eq!(stage, "gen-data"),
        other => panic!("expected missing data, got {:?}", other),
    }
    p.gen_data().unwrap();
    match p.cache_outputs() {
        Err(CliError::MissingArtifact { stage, .. }) => assert_eq!(stage, "train-base"),
        other => panic!("expected missing base, got {:?}", other),
    }
}

#[test]
fn report_refuses_mixed_provenance_and_tampering() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let d = tempfile::tempdir().unwrap();
    let ws = Workspace::open(d.path()).unwrap();
    let p = quiet(cfg, &ws);
    for stage in [
        Pipeline::gen_data,
        Pipeline::train_base,
        Pipeline::cache_outputs,
        Pipeline::compute_means,
        Pipeline::train_masks,
        Pipeline::eval,
        Pipeline::overlap,
        Pipeline::sparsity,
        Pipeline::compose,
    ] {
        stage(&p).unwrap();
    }
    // Point the overlap artifact at a different mask set.
    let manifest = ws.dir("overlap", &p.overlap_key()).join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace(&p.masks_key(), "0000000000000000")).unwrap();
    assert!(matches!(p.report(), Err(CliError::HashMismatch(_))));
    fs::write(&manifest, &text).unwrap();

    let metrics = ws.dir("eval", &p.eval_key()).join("metrics.json");
    let original = fs::read(&metrics).unwrap();
    fs::write(&metrics, b"[]").unwrap();
    assert!(matches!(p.report(), Err(CliError::HashMismatch(_))));
    fs::write(&metrics, original).unwrap();
    p.report().unwrap();
}

#[test]
fn six_unary_tasks_give_a_six_by_six_heatmap() {
    let text = TINY
        .replace("tasks = copy, reverse, echo", "tasks = copy, echo, repeat, reverse, swap, shift")
        .replace("[sensitivity]\ntask = copy\nlambdas = 1e-2, 1e-6\n", "")
        .replace("epochs = 3", "epochs = 1");
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let d = tempfile::tempdir().unwrap();
    let ws = Workspace::open(d.path()).unwrap();
    let p = quiet(cfg, &ws);
    p.run_all().unwrap();
    let csv = fs::read_to_string(ws.dir("report", &p.report_key()).join("heatmap_f_t_all.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "circuit,copy,echo,repeat,reverse,swap,shift");
    for l in &lines[1..] {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells.len(), 7);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().is_ok()), "{}", l);
    }
}

fn circomp(args: &[&str], dir: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_circomp"))
        .args(args)
        .arg("--quiet")
        .arg("--workspace")
        .arg(dir.join("ws"))
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let conf = d.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let c = conf.to_str().unwrap();
    assert_eq!(circomp(&["--config", c, "report"], d.path()), 3);
    let bad = d.path().join("bad.conf");
    fs::write(&bad, "[model]\nd_model = many\n").unwrap();
    assert_eq!(circomp(&["--config", bad.to_str().unwrap(), "gen-data"], d.path()), 2);
    assert_eq!(circomp(&["--config", c, "gen-data"], d.path()), 0);
    assert_eq!(circomp(&["--config", c, "gen-data"], d.path()), 0);

    let diverge = d.path().join("diverge.conf");
    fs::write(&diverge, TINY.replace("[base]\nepochs = 2", "[base]\nepochs = 2\nlr = 1e300\nclip = 0")).unwrap();
    assert_eq!(circomp(&["--config", diverge.to_str().unwrap(), "gen-data"], d.path()), 0);
    assert_eq!(circomp(&["--config", diverge.to_str().unwrap(), "train-base"], d.path()), 4);
}
