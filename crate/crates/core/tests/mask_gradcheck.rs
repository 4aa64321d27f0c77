//! Finite-difference check of the relaxed-mask loss through a full transformer.

use circomp::masking::mask_loss;
use circomp::model::{EncodedSample, ModelConfig, TransformerModel};
use circomp::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_and_grad(
    model: &TransformerModel<f64>,
    s: &Tensor<f64>,
    beta: f64,
    lambda: f64,
    fill: &[f64],
    samples: &[EncodedSample],
    target: &Tensor<f64>,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let batch = model.make_batch(&refs).unwrap();
    let mut tape = Tape::new();
    let t = mask_loss(&mut tape, model, s, beta, lambda, fill, &batch, target, weights).unwrap();
    let l = tape.value(t.loss).item();
    let g = tape.backward(t.loss).unwrap().get(t.s).unwrap().data().to_vec();
    (l, g)
}

#[test]
fn mask_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig::encoder_decoder(1, 1, 8, 2, 12, 10, 9, 9);
    let model = TransformerModel::<f64>::new(cfg, 21).unwrap();
    let n = model.site_map().len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = vec![
        EncodedSample { src: vec![3, 4, 5], tgt: vec![5, 4] },
        EncodedSample { src: vec![6], tgt: vec![6, 7, 8] },
    ];
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let batch = model.make_batch(&refs).unwrap();
    let rows = batch.size * batch.tgt_len;
    let mut target = vec![0.0; rows * 9];
    for r in 0..rows {
        let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        for j in 0..9 {
            target[r * 9 + j] = raw[j] / z;
        }
    }
    let target = Tensor::new(&[rows, 9], target).unwrap();
    let weights: Vec<f64> = batch.tgt_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let fill: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let s = Tensor::new(&[n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (beta, lambda) = (3.0, 0.05);

    let (_, grad) = loss_and_grad(&model, &s, beta, lambda, &fill, &samples, &target, &weights);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(3) {
        let mut plus = s.clone();
        plus.data_mut()[i] += h;
        let mut minus = s.clone();
        minus.data_mut()[i] -= h;
        let lp = loss_and_grad(&model, &plus, beta, lambda, &fill, &samples, &target, &weights).0;
        let lm = loss_and_grad(&model, &minus, beta, lambda, &fill, &samples, &target, &weights).0;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {}", worst);
}
