use super::*;
use crate::model::ModelConfig;

fn tiny_model(seed: u64) -> TransformerModel<f32> {
    TransformerModel::new(ModelConfig::encoder_decoder(1, 1, 8, 2, 12, 10, 9, 9), seed).unwrap()
}

fn sample(src: &[usize], tgt: &[usize]) -> EncodedSample {
    EncodedSample {
        src: src.to_vec(),
        tgt: tgt.to_vec(),
    }
}

fn corpus() -> Vec<EncodedSample> {
    vec![
        sample(&[3, 4, 5], &[3, 4, 5]),
        sample(&[6], &[6]),
        sample(&[7, 8], &[7, 8]),
        sample(&[4, 4, 3, 5], &[4, 4, 3, 5]),
    ]
}

#[test]
fn soft_mask_limits() {
    assert_eq!(apply_soft_mask(2.0, 1e6, 1.0, -1.0), 2.0);
    assert_eq!(apply_soft_mask(2.0, -1e6, 1.0, -1.0), -1.0);
    for beta in [1.0, 7.0, 200.0] {
        assert_eq!(apply_soft_mask(2.0, 0.0, beta, -1.0), 0.5);
    }
}

#[test]
fn binarize_examples() {
    assert_eq!(binarize(&[0.3, -0.3]), vec![true, false]);
    assert_eq!(binarize(&[0.0]), vec![false]);
    assert!(binarize(&[1e-9, 2.0, 5.0]).iter().all(|&b| b));
}

#[test]
fn beta_schedule_endpoints() {
    assert_eq!(beta_at(0, 50, 200.0), 1.0);
    assert!((beta_at(50, 50, 200.0) - 200.0).abs() < 1e-9);
    assert!((beta_at(25, 50, 200.0) - 200f64.sqrt()).abs() < 1e-9);
    for e in 1..50 {
        assert!(beta_at(e, 50, 200.0) > beta_at(e - 1, 50, 200.0));
    }
}

#[test]
fn mean_ablation_matches_streaming_average() {
    let model = tiny_model(1);
    let data = corpus();
    let batched = compute_mean_ablation(&model, &data, 3, "copy").unwrap();
    // Oracle: one sample at a time, every row is a real token.
    let map = model.site_map();
    let mut sums = vec![0.0f64; map.len()];
    let mut counts = vec![0usize; map.len()];
    for s in &data {
        let b = model.make_batch(&[s]).unwrap();
        let t = model.forward_teacher_forced(&b, &NoHook).unwrap();
        for (blk, out) in t.module_outputs.iter().enumerate() {
            for r in 0..out.rows() {
                for (j, v) in out.row(r).iter().enumerate() {
                    sums[blk * 8 + j] += *v as f64;
                    counts[blk * 8 + j] += 1;
                }
            }
        }
    }
    for i in 0..map.len() {
        let expect = sums[i] / counts[i] as f64;
        assert!((batched.values[i] as f64 - expect).abs() < 1e-5, "site {}", i);
    }
    assert_eq!(batched.task.as_deref(), Some("copy"));
    assert_eq!(batched.dataset_hash, Some(dataset_hash(&data)));
    assert!(matches!(compute_mean_ablation(&model, &[], 3, "copy"), Err(Error::EmptyDataset)));
}

#[test]
fn near_identity_mask_loss_is_cache_entropy() {
    let model = tiny_model(2);
    let data = corpus();
    let cache = OutputCache::build(&model, &data, 2).unwrap();
    let n = model.site_map().len();
    let fill = vec![0.0f32; n];
    let refs: Vec<&EncodedSample> = data.iter().collect();
    let batch = model.make_batch(&refs).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (target, weights) = cached_targets::<f32>(&cache, &idx, &batch).unwrap();
    let mut tape = Tape::new();
    let s = Tensor::full(&[n], 100.0f32);
    let terms = mask_loss(&mut tape, &model, &s, 1.0, 0.0, &fill, &batch, &target, &weights).unwrap();
    let ce = tape.value(terms.loss).item() as f64;
    let mut entropy = 0.0;
    let mut rows = 0;
    for i in 0..cache.len() {
        for p in cache.sample(i).chunks(cache.vocab()) {
            let sum: f64 = p.iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            entropy -= p.iter().filter(|&&x| x > 0.0).map(|&x| x as f64 * (x as f64).ln()).sum::<f64>();
            rows += 1;
        }
    }
    entropy /= rows as f64;
    assert!((ce - entropy).abs() < 1e-5, "{} vs {}", ce, entropy);
}

#[test]
fn training_leaves_model_frozen_and_moves_scores() {
    let model = tiny_model(3);
    let before = model.hash();
    let data = corpus();
    let cache = OutputCache::build(&model, &data, 2).unwrap();
    let abl = compute_mean_ablation(&model, &data, 2, "copy").unwrap();
    let spec = TrainSpec {
        lambda: 1e-2,
        lr: 1e-2,
        epochs: 5,
        beta_max: 20.0,
        s_init: 0.5,
        batch_size: 2,
        seed: 4,
    };
    let p = train_mask(&model, &data, &cache, &abl, &spec).unwrap();
    assert_eq!(model.hash(), before);
    assert_eq!(p.history.len(), 5);
    assert_eq!(p.s.len(), model.site_map().len());
    assert!(p.s.iter().any(|&v| v != 0.5));
    assert_eq!(p.history[0].beta, 1.0);
    // Same inputs, same result.
    assert_eq!(train_mask(&model, &data, &cache, &abl, &spec).unwrap(), p);
}

#[test]
fn cache_keys_are_enforced() {
    let model = tiny_model(4);
    let data = corpus();
    let cache = OutputCache::build(&model, &data, 4).unwrap();
    let abl = AblationSpec::zero(model.site_map().len());
    let spec = TrainSpec {
        epochs: 1,
        ..TrainSpec::default()
    };
    let other = &data[..2];
    assert!(matches!(train_mask(&model, other, &cache, &abl, &spec), Err(Error::CacheMismatch(_))));
    let other_model = tiny_model(5);
    assert!(matches!(train_mask(&other_model, &data, &cache, &abl, &spec), Err(Error::CacheMismatch(_))));
    let short = AblationSpec::zero(3);
    assert!(matches!(train_mask(&model, &data, &cache, &short, &spec), Err(Error::SiteMapMismatch(_))));
    let back = OutputCache::from_bytes(&cache.to_bytes()).unwrap();
    assert_eq!(back, cache);
}

fn circuit_for(model: &TransformerModel<f32>, mask: Vec<bool>, ablation: AblationSpec) -> Circuit {
    Circuit {
        mask,
        ablation,
        task: "copy".into(),
        model_hash: model.hash(),
        site_map: model.site_map().descriptor(),
        train_spec: Some(TrainSpec::default()),
        composition: None,
    }
}

#[test]
fn hard_masks_all_ones_and_all_zeros() {
    let model = tiny_model(6);
    let n = model.site_map().len();
    let data = corpus();
    let abl = compute_mean_ablation(&model, &data, 4, "copy").unwrap();
    let full = circuit_for(&model, vec![true; n], abl);
    let refs: Vec<&EncodedSample> = data.iter().collect();
    let batch = model.make_batch(&refs).unwrap();
    let base = model.logits(&batch, &NoHook).unwrap();
    assert_eq!(apply_hard_mask(&model, &full, &batch).unwrap(), base);

    // With every module zeroed the output ignores the source.
    let empty = circuit_for(&model, vec![false; n], AblationSpec::zero(n));
    let a = sample(&[3, 4, 5], &[6, 7]);
    let b = sample(&[8, 8], &[6, 7]);
    let la = apply_hard_mask(&model, &empty, &model.make_batch(&[&a]).unwrap()).unwrap();
    let lb = apply_hard_mask(&model, &empty, &model.make_batch(&[&b]).unwrap()).unwrap();
    assert_eq!(la, lb);

    let wrong = circuit_for(&model, vec![true; n - 1], AblationSpec::zero(n - 1));
    assert!(matches!(apply_hard_mask(&model, &wrong, &batch), Err(Error::SiteMapMismatch(_))));
}

#[test]
fn indirect_effect_of_natural_value_is_zero() {
    let model = tiny_model(7);
    // One source token and an empty target: every module has a single row.
    let s = sample(&[5], &[]);
    let batch = model.make_batch(&[&s]).unwrap();
    let trace = model.forward_teacher_forced(&batch, &NoHook).unwrap();
    let metric = |l: &Tensor<f32>| l.data().iter().map(|&v| v as f64).sum::<f64>();
    for site in [0, 9, 17, 30] {
        let natural = trace.module_outputs[site / 8].data()[site % 8];
        assert_eq!(indirect_effect(&model, site, &batch, natural, metric).unwrap(), 0.0);
    }
    let moved = indirect_effect(&model, 3, &batch, 25.0, metric).unwrap();
    assert!(moved != 0.0);
}

#[test]
fn circuit_files_round_trip() {
    let model = tiny_model(8);
    let n = model.site_map().len();
    let data = corpus();
    let abl = compute_mean_ablation(&model, &data, 4, "copy").unwrap();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let mut c = circuit_for(&model, mask, abl);
    c.composition = Some(Composition {
        op: "union".into(),
        parents: vec!["copy".into(), "echo".into()],
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.circuit.json");
    c.save(&path).unwrap();
    assert_eq!(Circuit::load(&path).unwrap(), c);
    let (json, mean) = c.to_files();
    assert!(json.contains("\"mean_file\""));
    let (name, mut bytes) = mean.unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(Circuit::from_files(&json, |_| Ok(bytes.clone())).is_err());
    assert!(name.starts_with("mean-"));

    let z = circuit_for(&model, vec![false; n], AblationSpec::zero(n));
    let (json, mean) = z.to_files();
    assert!(mean.is_none());
    assert_eq!(Circuit::from_files(&json, |_| unreachable!()).unwrap(), z);
}
