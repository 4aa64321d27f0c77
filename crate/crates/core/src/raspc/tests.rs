use super::*;
use crate::grammar::{eval_expr, Expr};
use crate::masking::apply_hard_mask;
use crate::model::{EncodedSample, Module, NoHook};

const TASKS: [OpKind; 4] = [OpKind::Copy, OpKind::Reverse, OpKind::Echo, OpKind::Swap];

fn alphabet(n: usize) -> Vec<String> {
    probe_alphabet(n)
}

fn reference(task: OpKind, x: &[String]) -> Vec<String> {
    eval_expr(&Expr::apply(task, vec![Expr::leaf(x)]))
}

fn compiled(task: OpKind) -> (RaspProgram, CompiledModel) {
    let p = build_program(task, 4).unwrap();
    let c = compile(&p, &alphabet(4), reference_config(task).unwrap()).unwrap();
    (p, c)
}

fn probes(c: &CompiledModel, task: OpKind, inputs: &[Vec<String>]) -> Vec<EncodedSample> {
    let outs: Vec<Vec<String>> = inputs.iter().map(|x| reference(task, x)).collect();
    c.samples(inputs, &outs).unwrap()
}

#[test]
fn program_examples() {
    let x = ["A1", "B1", "C1", "D1"];
    assert_eq!(build_program(OpKind::Copy, 4).unwrap().run(&x).unwrap(), x);
    assert_eq!(build_program(OpKind::Reverse, 4).unwrap().run(&x).unwrap(), ["D1", "C1", "B1", "A1"]);
    assert_eq!(build_program(OpKind::Swap, 4).unwrap().run(&x).unwrap(), ["D1", "B1", "C1", "A1"]);
    assert_eq!(build_program(OpKind::Echo, 4).unwrap().run(&x).unwrap(), ["A1", "B1", "C1", "D1", "D1"]);
    assert!(matches!(build_program(OpKind::Repeat, 4), Err(Error::UnsupportedTask(_))));
    assert!(build_program(OpKind::Copy, 4).unwrap().run(&["A1"]).is_err());
}

#[test]
fn interpreter_matches_grammar_on_all_inputs() {
    let inputs = all_inputs(&alphabet(10), 4);
    assert_eq!(inputs.len(), 10_000);
    for task in TASKS {
        let p = build_program(task, 4).unwrap();
        for x in &inputs {
            assert_eq!(p.run(x).unwrap(), reference(task, x), "{} on {:?}", task, x);
        }
    }
}

#[test]
fn aggregate_defaults_when_nothing_or_conflicting_selected() {
    let mut p = RaspProgram::new("t", 3);
    let i = p.indices();
    let t = p.tokens();
    let none = p.select(i, i, Predicate::False).unwrap();
    let all = p.select(i, i, Predicate::True).unwrap();
    let a = p.aggregate("a", none, t).unwrap();
    let b = p.aggregate("b", all, t).unwrap();
    p.set_output(a).unwrap();
    let x: Vec<String> = ["A1", "B1", "A1"].iter().map(|s| s.to_string()).collect();
    assert_eq!(p.interpret(&x).unwrap(), vec![None, None, None]);
    p.set_output(b).unwrap();
    assert_eq!(p.interpret(&x).unwrap(), vec![None, None, None]);
    let same: Vec<String> = vec!["C1".into(); 3];
    assert_eq!(p.interpret(&same).unwrap(), vec![Some(Value::Sym("C1".into())); 3]);
    assert!(p.aggregate("bad", Selector(0), t).is_err());
}

#[test]
fn compiled_models_match_their_programs() {
    let inputs = all_inputs(&alphabet(4), 4);
    for task in TASKS {
        let (p, c) = compiled(task);
        let cfg = reference_config(task).unwrap();
        assert_eq!(c.model.config.d_model, cfg.d_model);
        assert_eq!(c.model.config.d_head, cfg.d_head);
        assert_eq!(c.model.config.n_dec_layers, cfg.n_layers);
        assert_eq!(c.model.config.n_heads, cfg.n_heads);
        let out = c.run(&inputs).unwrap();
        for (x, y) in inputs.iter().zip(&out) {
            assert_eq!(*y, p.run(x).unwrap(), "{} on {:?}", task, x);
        }
    }
}

#[test]
fn reverse_agrees_with_interpreter_on_random_inputs() {
    use rand::{Rng, SeedableRng};
    let (p, c) = compiled(OpKind::Reverse);
    let alpha = alphabet(4);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Vec<String>> = (0..200)
        .map(|_| (0..4).map(|_| alpha[rng.gen_range(0..4)].clone()).collect())
        .collect();
    let out = c.run(&inputs).unwrap();
    assert!(inputs.iter().zip(&out).all(|(x, y)| *y == p.run(x).unwrap()));
}

#[test]
fn wide_alphabet_needs_a_wider_model() {
    let p = build_program(OpKind::Copy, 4).unwrap();
    let err = compile(&p, &alphabet(10), reference_config(OpKind::Copy).unwrap()).unwrap_err();
    assert!(matches!(err, Error::DimensionOverflow { needed: 26, available: 15, .. }));
    let wide = CompileConfig {
        d_model: 26,
        d_head: 11,
        n_layers: 1,
        n_heads: 1,
    };
    let c = compile(&p, &alphabet(10), wide).unwrap();
    let inputs = all_inputs(&alphabet(10), 4);
    assert_eq!(c.run(&inputs).unwrap(), inputs);
    let narrow_head = CompileConfig { d_head: 4, ..wide };
    assert!(matches!(
        compile(&p, &alphabet(10), narrow_head),
        Err(Error::DimensionOverflow { what: "query/key width", .. })
    ));
    let rev = build_program(OpKind::Reverse, 4).unwrap();
    let one_layer = CompileConfig { d_model: 37, d_head: 10, n_layers: 1, n_heads: 1 };
    assert!(matches!(
        compile(&rev, &alphabet(4), one_layer),
        Err(Error::DimensionOverflow { what: "layers", .. })
    ));
}

#[test]
fn residual_basis_is_labelled_once_per_dimension() {
    for task in TASKS {
        let (_, c) = compiled(task);
        assert_eq!(c.labels.len(), c.model.config.d_model);
        let set: std::collections::HashSet<&String> = c.labels.iter().collect();
        assert_eq!(set.len(), c.labels.len());
        assert_eq!(c.labels[0], "one");
    }
    let (_, c) = compiled(OpKind::Copy);
    assert_eq!(c.labels.iter().filter(|l| l.starts_with("copy:")).count(), 4);
}

#[test]
fn copy_ground_truth_is_its_attention_output() {
    let (_, c) = compiled(OpKind::Copy);
    let inputs = all_inputs(&alphabet(4), 4);
    let data = probes(&c, OpKind::Copy, &inputs);
    let gt = extract_ground_truth(&c, &data).unwrap();
    let map = c.model.site_map();
    let attn = map.block_range(0);
    let ff = map.block_range(1);
    assert_eq!(map.blocks()[1].2, Module::Ff);
    let frac = gt[attn.clone()].iter().filter(|b| **b).count() as f64 / attn.len() as f64;
    assert!((frac - 0.2667).abs() < 1e-4, "{}", frac);
    assert!(gt[ff].iter().all(|b| !b));
    for (i, &on) in gt.iter().enumerate() {
        if on {
            assert!(c.labels[i % 15].starts_with("copy:"));
        }
    }
}

#[test]
fn ground_truth_is_stable_and_sufficient() {
    for task in TASKS {
        let (_, c) = compiled(task);
        let inputs = all_inputs(&alphabet(4), 4);
        let data = probes(&c, task, &inputs);
        let (a, b) = data.split_at(128);
        let gt = extract_ground_truth(&c, &data).unwrap();
        assert_eq!(extract_ground_truth(&c, a).unwrap(), gt, "{}", task);
        assert_eq!(extract_ground_truth(&c, b).unwrap(), gt, "{}", task);
        let circuit = ground_truth_circuit(&c, gt.clone());
        let refs: Vec<&EncodedSample> = data.iter().collect();
        let batch = c.model.make_batch(&refs).unwrap();
        let base = c.model.logits(&batch, &NoHook).unwrap();
        let masked = apply_hard_mask(&c.model, &circuit, &batch).unwrap();
        // Sites below the extraction threshold carry at most sub-normal residue.
        let worst = base.data().iter().zip(masked.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < f32::MIN_POSITIVE, "{}: logits move by {:e}", task, worst);

        let report = validate_recovery(&c, &circuit, &gt, &data).unwrap();
        assert!(report.pass && report.f_t == 1.0 && report.accuracy == 1.0, "{:?}", report);
        let complement = ground_truth_circuit(&c, gt.iter().map(|b| !b).collect());
        let bad = validate_recovery(&c, &complement, &gt, &data).unwrap();
        assert_eq!(bad.iou, 0.0);
        assert!(!bad.pass);
    }
}

#[test]
fn compiled_model_round_trips_with_labels() {
    let (_, c) = compiled(OpKind::Echo);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("echo.ckpt");
    c.save(&path).unwrap();
    assert!(dir.path().join("echo.ckpt.labels.json").exists());
    let back = CompiledModel::load(&path).unwrap();
    assert_eq!(back.labels, c.labels);
    assert_eq!(back.model.hash(), c.model.hash());
    assert_eq!(back.slot.as_deref(), Some(SLOT));
    let x = vec![vec!["A1", "B1", "C1", "B1"]];
    assert_eq!(back.run(&x).unwrap(), c.run(&x).unwrap());
}
