use super::*;

fn tiny(arch: Arch) -> ModelConfig {
    let mut cfg = ModelConfig::encoder_decoder(2, 2, 8, 2, 12, 10, 9, 7);
    if arch == Arch::DecoderOnlyBidirectional {
        cfg.arch = arch;
        cfg.n_enc_layers = 0;
        cfg.tgt_vocab = 9;
    }
    cfg
}

fn sample(src: &[usize], tgt: &[usize]) -> EncodedSample {
    EncodedSample {
        src: src.to_vec(),
        tgt: tgt.to_vec(),
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn site_count_closed_form() {
    let full_size = ModelConfig::encoder_decoder(6, 6, 512, 8, 2048, 64, 40, 40);
    let map = full_size.site_map();
    assert_eq!(map.len(), 15360);
    assert_eq!(map.len(), 512 * (2 * 6 + 3 * 6));
    let small = tiny(Arch::EncoderDecoder).site_map();
    assert_eq!(small.len(), 8 * (2 * 2 + 3 * 2));
    for i in 0..small.len() {
        assert_eq!(small.index(&small.site(i)), Some(i));
    }
    assert_eq!(small.site(0).stack, Stack::Encoder);
    assert_eq!(small.site(4 * 8).module, Module::Mhsa);
    assert_eq!(small.site(5 * 8).module, Module::Mhca);
    let dec_only = tiny(Arch::DecoderOnlyBidirectional).site_map();
    assert_eq!(dec_only.len(), 8 * 2 * 2);
    assert_ne!(dec_only.descriptor(), small.descriptor());
}

#[test]
fn sinusoidal_table_matches_formula() {
    let t = sinusoidal_positions::<f64>(8, 4);
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    for p in 0..8 {
        let pf = p as f64;
        let expect = [
            pf.sin(),
            pf.cos(),
            (pf / 100.0).sin(),
            (pf / 100.0).cos(),
        ];
        for (a, b) in t.row(p).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(sinusoidal_positions::<f32>(50, 16).data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn forward_is_deterministic_and_identity_mask_is_exact() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 1).unwrap();
    let s1 = sample(&[3, 4, 5], &[3, 4]);
    let s2 = sample(&[6], &[5, 5, 6]);
    let batch = model.make_batch(&[&s1, &s2]).unwrap();
    let a = model.logits(&batch, &NoHook).unwrap();
    let b = model.logits(&batch, &NoHook).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let n = model.site_map().len();
    let keep = vec![true; n];
    let fill = vec![0.5f32; n];
    let mask = HardMask::new(&keep, &fill, 8).unwrap();
    assert_eq!(bits(&model.logits(&batch, &mask).unwrap()), bits(&a));
}

#[test]
fn zeroing_feed_forward_changes_logits() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 2).unwrap();
    let map = model.site_map();
    let s = sample(&[3, 4, 5], &[3, 4]);
    let batch = model.make_batch(&[&s]).unwrap();
    let keep: Vec<bool> = (0..map.len()).map(|i| map.site(i).module != Module::Ff).collect();
    let fill = vec![0.0f32; map.len()];
    let zero_ff = HardMask::new(&keep, &fill, map.d_model()).unwrap();
    assert_ne!(
        bits(&model.logits(&batch, &NoHook).unwrap()),
        bits(&model.logits(&batch, &zero_ff).unwrap())
    );
}

#[test]
fn trace_records_unhooked_values() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 3).unwrap();
    let map = model.site_map();
    let s = sample(&[3, 4], &[5]);
    let batch = model.make_batch(&[&s]).unwrap();
    let plain = model.forward_teacher_forced(&batch, &NoHook).unwrap();
    let zero_all = |tape: &mut Tape<f32>, _: usize, z: Var| {
        let zeros = Tensor::zeros(tape.shape(z));
        Ok(tape.constant(zeros))
    };
    let hooked = model.forward_teacher_forced(&batch, &zero_all).unwrap();
    assert_eq!(plain.module_outputs.len(), map.blocks().len());
    // The first module sees the same input either way.
    assert_eq!(bits(&plain.module_outputs[0]), bits(&hooked.module_outputs[0]));
    assert_eq!(plain.module_outputs[0].shape(), &[2, 8]);
    assert_eq!(plain.module_outputs[4].shape(), &[2, 8]);
}

#[test]
fn batching_matches_single_samples() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 4).unwrap();
    let s1 = sample(&[3, 4, 5, 6], &[3, 4, 5]);
    let s2 = sample(&[6], &[5]);
    let both = model.logits(&model.make_batch(&[&s1, &s2]).unwrap(), &NoHook).unwrap();
    let alone = model.logits(&model.make_batch(&[&s2]).unwrap(), &NoHook).unwrap();
    // s2 occupies rows 4.. of the padded batch (tgt_len 4); its first two rows are real.
    for r in 0..2 {
        for (a, b) in both.row(4 + r).iter().zip(alone.row(r)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 5).unwrap();
    let bytes = model.to_checkpoint_bytes(serde_json::json!({"note": "x"}));
    let (back, extra) = TransformerModel::<f32>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(extra["note"], "x");
    assert_eq!(back.hash(), model.hash());
    let s = sample(&[3, 4], &[5, 6]);
    let b = model.make_batch(&[&s]).unwrap();
    assert_eq!(bits(&model.logits(&b, &NoHook).unwrap()), bits(&back.logits(&b, &NoHook).unwrap()));
    assert_ne!(TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 6).unwrap().hash(), model.hash());
}

#[test]
fn eos_favoring_head_decodes_empty() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 7).unwrap();
    let mut named: HashMap<String, Tensor<f32>> = model.named_tensors().into_iter().collect();
    named.insert("dec.ln_final.gain".into(), Tensor::zeros(&[8]));
    named.insert("dec.ln_final.bias".into(), Tensor::full(&[8], 1.0));
    let mut out = Tensor::<f32>::zeros(&[8, 7]);
    for r in 0..8 {
        out.data_mut()[r * 7 + EOS_ID] = 1.0;
    }
    named.insert("out".into(), out);
    let m = TransformerModel::from_named(model.config.clone(), named).unwrap();
    let srcs: Vec<&[usize]> = vec![&[3, 4, 5], &[6]];
    assert_eq!(m.greedy_decode(&srcs, &NoHook).unwrap(), vec![Vec::<usize>::new(), Vec::new()]);
}

#[test]
fn greedy_decode_is_deterministic_and_bounded() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 8).unwrap();
    let srcs: Vec<&[usize]> = vec![&[3, 4, 5], &[6], &[8, 8]];
    let a = model.greedy_decode(&srcs, &NoHook).unwrap();
    assert_eq!(a, model.greedy_decode(&srcs, &NoHook).unwrap());
    assert!(a.iter().all(|o| o.len() < model.config.max_len));
    // Batched and one-at-a-time decoding agree.
    for (i, s) in srcs.iter().enumerate() {
        assert_eq!(model.greedy_decode(&[s], &NoHook).unwrap()[0], a[i]);
    }
}

#[test]
fn decoder_only_attention_is_bidirectional() {
    let model = TransformerModel::<f32>::new(tiny(Arch::DecoderOnlyBidirectional), 9).unwrap();
    let a = sample(&[3, 4, 5], &[3, 3, 3]);
    let b = sample(&[3, 4, 6], &[3, 3, 3]);
    let la = model.logits(&model.make_batch(&[&a]).unwrap(), &NoHook).unwrap();
    let lb = model.logits(&model.make_batch(&[&b]).unwrap(), &NoHook).unwrap();
    assert_eq!(la.shape(), &[3, 9]);
    // Changing the last token changes the first output position.
    assert_ne!(la.row(0), lb.row(0));
    let decoded = model.greedy_decode(&[&a.src], &NoHook).unwrap();
    assert_eq!(decoded[0].len(), 3);
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 10).unwrap();
    let long = sample(&[3; 11], &[3]);
    assert!(matches!(model.make_batch(&[&long]), Err(Error::LengthExceeded { .. })));
    let unknown = sample(&[42], &[3]);
    assert!(matches!(model.make_batch(&[&unknown]), Err(Error::UnknownToken(_))));
    let mut cfg = tiny(Arch::EncoderDecoder);
    cfg.d_model = 9;
    assert!(TransformerModel::<f32>::new(cfg, 0).is_err());
    let mut cfg = tiny(Arch::EncoderDecoder);
    cfg.dropout = 1.0;
    assert!(TransformerModel::<f32>::new(cfg, 0).is_err());
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let mut model = TransformerModel::<f32>::new(tiny(Arch::EncoderDecoder), 11).unwrap();
    let before = model.hash();
    let data = vec![sample(&[3], &[3])];
    let spec = BaseTrainSpec {
        epochs: 0,
        ..BaseTrainSpec::default()
    };
    assert!(train_base(&mut model, &data, &spec, |_, _| Ok(())).unwrap().is_empty());
    assert_eq!(model.hash(), before);
}

#[test]
fn training_fits_a_tiny_copy_task() {
    let mut cfg = tiny(Arch::EncoderDecoder);
    cfg.tgt_vocab = 9;
    let mut model = TransformerModel::<f32>::new(cfg, 12).unwrap();
    let data: Vec<EncodedSample> = (3..9)
        .flat_map(|a| (3..9).map(move |b| sample(&[a, b], &[a, b])))
        .collect();
    let spec = BaseTrainSpec {
        epochs: 60,
        batch_size: 12,
        lr: 3e-3,
        clip: 1.0,
        warmup_steps: 0,
        linear_decay: false,
        seed: 1,
    };
    let mut calls = 0;
    let reports = train_base(&mut model, &data, &spec, |_, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 60);
    assert!(reports.last().unwrap().mean_loss < reports[0].mean_loss * 0.2);
    let srcs: Vec<&[usize]> = data.iter().map(|s| s.src.as_slice()).collect();
    let out = model.greedy_decode(&srcs, &NoHook).unwrap();
    let correct = out.iter().zip(&data).filter(|(o, s)| **o == s.tgt).count();
    assert!(correct * 10 >= data.len() * 9, "{} of {}", correct, data.len());
}
