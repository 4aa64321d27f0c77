use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodedSample, NoHook, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip: f64,
    /// Linear learning-rate warmup over this many optimizer steps.
    pub warmup_steps: usize,
    /// Decay the rate linearly to zero over the remaining steps.
    #[serde(default)]
    pub linear_decay: bool,
    pub seed: u64,
}

impl Default for BaseTrainSpec {
    fn default() -> Self {
        BaseTrainSpec {
            epochs: 10,
            batch_size: 64,
            lr: 5e-7,
            clip: 15.0,
            warmup_steps: 0,
            linear_decay: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// One-hot rows for the valid target positions.
pub(crate) fn one_hot<T: Real>(targets: &[usize], valid: &[bool], vocab: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); targets.len() * vocab];
    for (r, (&t, &v)) in targets.iter().zip(valid).enumerate() {
        if v {
            data[r * vocab + t] = T::one();
        }
    }
    Tensor::new(&[targets.len(), vocab], data).expect("one-hot shape")
}

/// Teacher-forced cross-entropy training against gold targets.
///
/// `on_epoch` runs after every epoch (for checkpointing); returning an error
/// aborts training.
pub fn train_base<T: Real>(
    model: &mut TransformerModel<T>,
    data: &[EncodedSample],
    spec: &BaseTrainSpec,
    mut on_epoch: impl FnMut(&EpochReport, &TransformerModel<T>) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    if spec.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if spec.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(spec.lr));
    let vocab = model.config.tgt_vocab;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = spec.epochs * data.len().div_ceil(spec.batch_size);
    let mut reports = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(spec.batch_size) {
            let samples: Vec<&EncodedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = model.make_batch(&samples)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let f = model.forward(&mut tape, &bound, &batch, &NoHook, Some(&mut rng))?;
            let target = one_hot(&batch.targets, &batch.tgt_valid, vocab);
            let weights: Vec<T> = batch
                .tgt_valid
                .iter()
                .map(|&v| if v { T::one() } else { T::zero() })
                .collect();
            let denom = T::of(batch.n_targets().max(1) as f64);
            let loss = tape.cross_entropy_soft(f.logits, &target, &weights, denom)?;
            let lv = tape.value(loss).item().f64();
            if !lv.is_finite() {
                return Err(Error::DivergenceDetected(format!(
                    "base loss {} at epoch {} step {}",
                    lv, epoch, steps
                )));
            }
            let grads = tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&grads)?;
            if spec.clip > 0.0 {
                model.params.clip_grad_norm(spec.clip);
            }
            let step = adam.steps() as usize + 1;
            adam.config.lr = if spec.warmup_steps > 0 && step < spec.warmup_steps {
                spec.lr * step as f64 / spec.warmup_steps as f64
            } else if spec.linear_decay {
                let rest = total_steps.saturating_sub(spec.warmup_steps).max(1);
                let done = step.saturating_sub(spec.warmup_steps);
                spec.lr * (1.0 - done as f64 / rest as f64).max(0.0)
            } else {
                spec.lr
            };
            adam.step(&mut model.params);
            total += lv;
            steps += 1;
        }
        let report = EpochReport {
            epoch,
            mean_loss: total / steps as f64,
            steps,
        };
        on_epoch(&report, model)?;
        reports.push(report);
    }
    Ok(reports)
}
