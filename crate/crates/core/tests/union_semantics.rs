use circomp::compose::{evaluate_composite_grid, union};
use circomp::masking::{decode_with_circuit, AblationKind, AblationSpec, Circuit};
use circomp::model::{EncodedSample, ModelConfig, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> TransformerModel<f32> {
    TransformerModel::new(ModelConfig::encoder_decoder(2, 2, 16, 2, 24, 10, 12, 12), 41).unwrap()
}

fn circuit(m: &TransformerModel<f32>, task: &str, mask: Vec<bool>, ablation: AblationSpec) -> Circuit {
    Circuit {
        mask,
        ablation,
        task: task.into(),
        model_hash: m.hash(),
        site_map: m.site_map().descriptor(),
        train_spec: None,
        composition: None,
    }
}

fn random_src(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.gen_range(1..6)).map(|_| rng.gen_range(3..12)).collect()
}

#[test]
fn zero_ablated_union_is_order_independent() {
    let m = model();
    let n = m.site_map().len();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c1 = circuit(&m, "a", (0..n).map(|_| rng.gen_bool(0.4)).collect(), AblationSpec::zero(n));
    let c2 = circuit(&m, "b", (0..n).map(|_| rng.gen_bool(0.4)).collect(), AblationSpec::zero(n));
    let (ab, ba) = (union(&c1, &c2).unwrap(), union(&c2, &c1).unwrap());
    let srcs: Vec<Vec<usize>> = (0..100).map(|_| random_src(&mut rng)).collect();
    let refs: Vec<&[usize]> = srcs.iter().map(|s| s.as_slice()).collect();
    assert_eq!(decode_with_circuit(&m, &ab, &refs).unwrap(), decode_with_circuit(&m, &ba, &refs).unwrap());
}

#[test]
fn mean_ablated_union_order_matters() {
    let m = model();
    let n = m.site_map().len();
    let map = m.site_map();
    let last = map.block_range(map.blocks().len() - 1);
    let keep: Vec<bool> = (0..n).map(|i| !last.contains(&i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let means = |rng: &mut ChaCha8Rng, scale: f32| AblationSpec {
        kind: AblationKind::Mean,
        values: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        task: None,
        dataset_hash: None,
    };
    let c1 = circuit(&m, "a", keep.clone(), means(&mut rng, 0.1));
    let c2 = circuit(&m, "b", keep, means(&mut rng, 30.0));
    let (ab, ba) = (union(&c1, &c2).unwrap(), union(&c2, &c1).unwrap());
    assert_eq!(ab.mask, ba.mask);
    let found = (0..100).any(|_| {
        let s = random_src(&mut rng);
        decode_with_circuit(&m, &ab, &[&s]).unwrap() != decode_with_circuit(&m, &ba, &[&s]).unwrap()
    });
    assert!(found, "no input separates the two union orders");
}

#[test]
fn composite_grid_is_deterministic_and_dedups() {
    let m = model();
    let n = m.site_map().len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = circuit(&m, "a", (0..n).map(|_| rng.gen_bool(0.5)).collect(), AblationSpec::zero(n));
    let d = circuit(&m, "b", (0..n).map(|_| rng.gen_bool(0.5)).collect(), AblationSpec::zero(n));
    let data: Vec<EncodedSample> = (0..20)
        .map(|_| {
            let s = random_src(&mut rng);
            EncodedSample { src: s.clone(), tgt: s }
        })
        .collect();
    let tasks = vec![("copy".to_string(), data.clone()), ("other".to_string(), data[..10].to_vec())];
    let single = evaluate_composite_grid(&m, &[(&c, &c)], &tasks, 8).unwrap();
    assert_eq!(single.rows, vec!["a".to_string()]);
    let g1 = evaluate_composite_grid(&m, &[(&c, &d)], &tasks, 8).unwrap();
    let g2 = evaluate_composite_grid(&m, &[(&c, &d)], &tasks, 8).unwrap();
    assert_eq!(g1, g2);
    // Zero ablation: both union orders coincide, so only one union row remains.
    assert_eq!(g1.rows, vec!["a", "b", "union(a,b)"]);
    assert_eq!(g1.to_csv().unwrap().lines().count(), 4);
}
