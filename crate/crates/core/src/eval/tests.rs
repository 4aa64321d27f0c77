use super::*;
use crate::grammar::Expr;
use crate::masking::AblationSpec;
use crate::model::ModelConfig;

#[test]
fn divergence_examples() {
    let p = [0.2, 0.3, 0.5];
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    assert_eq!(jsd_norm(&p, &p).unwrap(), 0.0);
    assert!((jsd_norm(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
    // m = (0.75, 0.25): KL(p‖m) = ½ln(4/3), KL(q‖m) = ln(4/3).
    let expect = 1.5 * (4.0f64 / 3.0).ln() / (2.0 * 2f64.ln());
    let got = jsd_norm(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    assert!((got - expect).abs() < 1e-12);
    assert!((got - 0.3113).abs() < 1e-4);
    assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
}

#[test]
fn invalid_distributions_are_rejected() {
    assert!(matches!(jsd_norm(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::InvalidDistribution(_))));
    assert!(matches!(kl_divergence(&[1.5, -0.5], &[0.5, 0.5]), Err(Error::InvalidDistribution(_))));
    assert!(matches!(jsd_norm(&[1.0], &[0.5, 0.5]), Err(Error::InvalidDistribution(_))));
    assert!(OutputDistribution::new(vec![vec![0.25; 4], vec![0.5, 0.5]]).is_ok());
    assert!(OutputDistribution::new(vec![vec![0.3; 3]]).is_err());
}

#[test]
fn differing_position_examples() {
    let x: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let echo = OpKind::Echo.apply(&[x.clone()]);
    assert_eq!(differing_positions(&x, &echo), vec![3]);
    assert!(differing_positions(&x, &x).is_empty());
    let pal: Vec<String> = ["A", "B", "A"].iter().map(|s| s.to_string()).collect();
    assert!(differing_positions(&pal, &OpKind::Reverse.apply(&[pal.clone()])).is_empty());
    assert_eq!(differing_positions(&x, &OpKind::Reverse.apply(&[x.clone()])), vec![0, 2]);

    let samples = vec![
        Sample::from_expr(&Expr::apply(OpKind::Echo, vec![Expr::leaf(&["A1", "B1"])])),
        Sample::from_expr(&Expr::apply(OpKind::Echo, vec![Expr::leaf(&["C1"])])),
    ];
    assert_eq!(differing_for_samples(OpKind::Copy, &samples).unwrap(), vec![vec![2], vec![1]]);
    assert!(differing_for_samples(OpKind::Append, &samples).is_err());
}

#[test]
fn overlap_examples() {
    let m = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<_>>();
    let (iou, iom) = mask_overlap(&m("1100"), &m("1010")).unwrap();
    assert!((iou - 1.0 / 3.0).abs() < 1e-12 && (iom - 0.5).abs() < 1e-12);
    assert_eq!(mask_overlap(&m("0110"), &m("0110")).unwrap(), (1.0, 1.0));
    assert_eq!(mask_overlap(&m("1100"), &m("0011")).unwrap(), (0.0, 0.0));
    assert_eq!(mask_overlap(&m("0000"), &m("0000")).unwrap(), (0.0, 0.0));
    assert!(matches!(mask_overlap(&m("10"), &m("100")), Err(Error::SiteMapMismatch(_))));
}

#[test]
fn sparsity_counts_per_module() {
    let map = ModelConfig::encoder_decoder(1, 1, 12, 2, 16, 8, 9, 9).site_map();
    let mut mask = vec![false; map.len()];
    for i in 0..3 {
        mask[map.block_range(2).start + i] = true;
    }
    let rep = sparsity(&mask, &map).unwrap();
    assert_eq!(rep.modules[2].fraction, 0.25);
    assert_eq!(rep.modules[2].kept, 3);
    assert!((rep.global - 3.0 / map.len() as f64).abs() < 1e-15);
    assert!(rep.modules.iter().enumerate().all(|(i, m)| i == 2 || m.fraction == 0.0));
    let full = sparsity(&vec![true; map.len()], &map).unwrap();
    assert!(full.global == 1.0 && full.modules.iter().all(|m| m.fraction == 1.0));
    let csv = sparsity_csv(&[("copy".into(), rep)]).unwrap();
    assert!(csv.starts_with("circuit,stack,layer,module,kept,total,fraction\n"));
    assert!(csv.contains("copy,decoder,0,MHSA,3,12,0.250000"));
}

fn tiny() -> TransformerModel<f32> {
    TransformerModel::new(ModelConfig::encoder_decoder(1, 1, 8, 2, 12, 10, 9, 9), 31).unwrap()
}

fn data() -> Vec<EncodedSample> {
    [[3, 4, 5].as_slice(), &[6], &[7, 8], &[8, 3, 3, 4]]
        .iter()
        .map(|s| EncodedSample {
            src: s.to_vec(),
            tgt: s.to_vec(),
        })
        .collect()
}

fn circuit(model: &TransformerModel<f32>, mask: Vec<bool>) -> Circuit {
    let n = mask.len();
    Circuit {
        mask,
        ablation: AblationSpec::zero(n),
        task: "copy".into(),
        model_hash: model.hash(),
        site_map: model.site_map().descriptor(),
        train_spec: None,
        composition: None,
    }
}

#[test]
fn all_ones_circuit_is_exactly_faithful() {
    let model = tiny();
    let c = circuit(&model, vec![true; model.site_map().len()]);
    let rec = evaluate(&model, &c, "copy", &data(), None, 3).unwrap();
    assert_eq!(rec.kl, 0.0);
    assert_eq!(rec.jsd, 0.0);
    assert_eq!(rec.f_t, 1.0);
    assert_eq!(rec.accuracy, exact_match(&model, &NoHook, &data(), 2).unwrap());
    assert_eq!(rec.n_samples, 4);
    assert_eq!(rec.n_positions, 3 + 1 + 1 + 1 + 2 + 1 + 4 + 1);
}

#[test]
fn pruned_circuit_loses_faithfulness_and_scope_filters() {
    let model = tiny();
    let n = model.site_map().len();
    let c = circuit(&model, (0..n).map(|i| i % 2 == 0).collect());
    let all = evaluate(&model, &c, "copy", &data(), None, 4).unwrap();
    assert!(all.f_t < 1.0 && all.f_t >= 0.0 && all.kl > 0.0);
    assert!((all.f_t + all.jsd - 1.0).abs() < 1e-15);
    let pos = vec![vec![0], vec![], vec![1], vec![]];
    let some = evaluate(&model, &c, "echo", &data(), Some(&pos), 4).unwrap();
    assert_eq!((some.scope, some.n_samples, some.n_positions), (Scope::DifferingOnly, 2, 2));
    let none = vec![Vec::new(); 4];
    assert!(matches!(
        evaluate(&model, &c, "copy", &data(), Some(&none), 4),
        Err(Error::EmptyScope { .. })
    ));
    let short = circuit(&model, vec![true; n - 8]);
    assert!(matches!(evaluate(&model, &short, "copy", &data(), None, 4), Err(Error::SiteMapMismatch(_))));
}

#[test]
fn report_writers() {
    let rec = |c: &str, e: &str, f: f64| MetricRecord {
        circuit_task: c.into(),
        eval_task: e.into(),
        scope: Scope::All,
        f_t: f,
        kl: 0.0,
        jsd: 1.0 - f,
        accuracy: 0.5,
        n_samples: 1,
        n_positions: 1,
    };
    let recs = vec![rec("copy", "copy", 1.0), rec("copy", "echo", 0.75)];
    let csv = metrics_csv(&recs).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "circuit_task,eval_task,scope,f_t,kl,jsd,accuracy");
    assert_eq!(csv.lines().nth(2).unwrap(), "copy,echo,all,0.750000,0.000000,0.250000,0.500000");
    let names: Vec<String> = vec!["copy".into(), "echo".into()];
    let h = Heatmap::from_records(&recs, "f_t", Scope::All, &names, &names).unwrap();
    assert_eq!(h.values, vec![vec![Some(1.0), Some(0.75)], vec![None, None]]);
    assert_eq!(h.to_csv().unwrap(), "circuit,copy,echo\ncopy,1.000000,0.750000\necho,,\n");
}
