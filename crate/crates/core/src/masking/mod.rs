//! Circuit discovery by continuous sparsification of module-output neurons.
//!
//! Each site `i` gets a real score `s_i`. During training the site carries
//! `σ(β s_i) z + (1 − σ(β s_i)) z̃`, the loss is soft cross-entropy against
//! the cached base-model distribution plus `λ Σ σ(β s)`, and β grows
//! geometrically from 1 to `β_max`. The final circuit is `m = [s > 0]`.

mod cache;
mod circuit;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::OutputCache;
pub use circuit::{AblationKind, AblationSpec, Circuit, Composition, CIRCUIT_VERSION};

use crate::error::{Error, Result};
use crate::model::{Arch, Batch, EncodedSample, HardMask, Intervention, NoHook, SoftMask, Stack, TransformerModel};
use crate::grammar::PAD_ID;
use crate::tensor::{sigmoid, Adam, AdamConfig, ParamStore, Real, Tape, Tensor};

/// SHA-256 over the id sequences of a tokenized dataset.
pub fn dataset_hash(data: &[EncodedSample]) -> String {
    let mut h = Sha256::new();
    for s in data {
        for part in [&s.src, &s.tgt] {
            h.update((part.len() as u64).to_le_bytes());
            for &t in part.iter() {
                h.update((t as u64).to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// `σ(β s) z + (1 − σ(β s)) z̃` for one site.
pub fn apply_soft_mask(z: f64, s: f64, beta: f64, ablated: f64) -> f64 {
    let g = sigmoid(beta * s);
    g * z + (1.0 - g) * ablated
}

/// Temperature at the start of epoch `epoch` of `epochs`: `β_max^(epoch/epochs)`.
pub fn beta_at(epoch: usize, epochs: usize, beta_max: f64) -> f64 {
    if epochs == 0 {
        return beta_max;
    }
    beta_max.powf(epoch as f64 / epochs as f64)
}

/// `m_i = 1` iff `s_i > 0`; zero scores are pruned.
pub fn binarize(s: &[f64]) -> Vec<bool> {
    s.iter().map(|&v| v > 0.0).collect()
}

/// Which rows of each module output are real tokens (not padding).
pub(crate) fn valid_rows(arch: Arch, stack: Stack, batch: &Batch) -> Vec<bool> {
    match (arch, stack) {
        (Arch::EncoderDecoder, Stack::Decoder) => batch.dec_in.iter().map(|&t| t != PAD_ID).collect(),
        _ => batch.src_valid.clone(),
    }
}

/// Per-site mean of the unhooked module outputs over every non-padding
/// position of every sample (teacher-forced).
pub fn compute_mean_ablation<T: Real>(
    model: &TransformerModel<T>,
    data: &[EncodedSample],
    batch_size: usize,
    task: &str,
) -> Result<AblationSpec> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let map = model.site_map();
    let d = map.d_model();
    let mut sums = vec![0.0f64; map.len()];
    let mut counts = vec![0usize; map.blocks().len()];
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = model.make_batch(&refs)?;
        let trace = model.forward_teacher_forced(&batch, &NoHook)?;
        for (b, (out, &(stack, _, _))) in trace.module_outputs.iter().zip(map.blocks()).enumerate() {
            let valid = valid_rows(model.config.arch, stack, &batch);
            for (r, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                for (j, v) in out.row(r).iter().enumerate() {
                    sums[b * d + j] += v.f64();
                }
                counts[b] += 1;
            }
        }
    }
    let values = sums
        .iter()
        .enumerate()
        .map(|(i, s)| (s / counts[i / d].max(1) as f64) as f32)
        .collect();
    Ok(AblationSpec {
        kind: AblationKind::Mean,
        values,
        task: Some(task.to_string()),
        dataset_hash: Some(dataset_hash(data)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub beta_max: f64,
    pub s_init: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lambda: 1e-4,
            lr: 1e-4,
            epochs: 500,
            beta_max: 200.0,
            s_init: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.beta_max >= 1.0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "mask training needs lambda >= 0, beta_max >= 1, lr > 0, batch_size > 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEpoch {
    pub epoch: usize,
    pub beta: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    /// `Σ σ(β s)` at the end of the epoch.
    pub gate_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub s: Vec<f64>,
    pub beta: f64,
    pub epochs: usize,
    pub history: Vec<MaskEpoch>,
}

/// Soft cross-entropy targets and row weights for a batch, from the cache.
fn cached_targets<T: Real>(
    cache: &OutputCache,
    idx: &[usize],
    batch: &Batch,
) -> Result<(Tensor<T>, Vec<T>)> {
    let v = cache.vocab();
    let mut target = vec![T::zero(); batch.size * batch.tgt_len * v];
    let mut weights = vec![T::zero(); batch.size * batch.tgt_len];
    for (bi, &si) in idx.iter().enumerate() {
        let probs = cache.sample(si);
        let rows = probs.len() / v;
        for r in 0..rows {
            let row = bi * batch.tgt_len + r;
            if !batch.tgt_valid[row] {
                return Err(Error::CacheMismatch(format!("sample {} has {} cached positions", si, rows)));
            }
            weights[row] = T::one();
            for (j, &p) in probs[r * v..(r + 1) * v].iter().enumerate() {
                target[row * v + j] = T::of(p as f64);
            }
        }
    }
    Ok((Tensor::new(&[batch.size * batch.tgt_len, v], target)?, weights))
}

/// Loss terms of one relaxed-mask pass; exposed for gradient checks.
pub struct MaskLoss {
    pub loss: crate::tensor::Var,
    pub cross_entropy: crate::tensor::Var,
    pub gate_mass: crate::tensor::Var,
    pub s: crate::tensor::Var,
}

/// Records `CE(masked logits, cached) + λ Σ σ(β s)` for one batch on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn mask_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &TransformerModel<T>,
    s: &Tensor<T>,
    beta: f64,
    lambda: f64,
    fill: &[T],
    batch: &Batch,
    target: &Tensor<T>,
    weights: &[T],
) -> Result<MaskLoss> {
    let bound = model.bind(tape, false);
    let s_var = tape.variable(s.clone());
    let scaled = tape.scale(s_var, T::of(beta));
    let gate = tape.sigmoid(scaled);
    let hook = SoftMask::new(tape, gate, fill, model.config.d_model)?;
    let f = model.forward(tape, &bound, batch, &hook, None)?;
    let n = weights.iter().filter(|w| **w != T::zero()).count().max(1);
    let ce = tape.cross_entropy_soft(f.logits, target, weights, T::of(n as f64))?;
    let mass = tape.sum(gate);
    let reg = tape.scale(mass, T::of(lambda));
    let loss = tape.add(ce, reg)?;
    Ok(MaskLoss {
        loss,
        cross_entropy: ce,
        gate_mass: mass,
        s: s_var,
    })
}

/// Learns site scores on a frozen model. Only `s` receives gradients.
pub fn train_mask<T: Real>(
    model: &TransformerModel<T>,
    data: &[EncodedSample],
    cache: &OutputCache,
    ablation: &AblationSpec,
    spec: &TrainSpec,
) -> Result<MaskParams> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cache.check(&model.hash(), &dataset_hash(data))?;
    let n = model.site_map().len();
    if ablation.values.len() != n {
        return Err(Error::SiteMapMismatch(format!(
            "ablation vector has {} values, model has {} sites",
            ablation.values.len(),
            n
        )));
    }
    let fill: Vec<T> = ablation.fill();
    let mut store = ParamStore::new();
    let sid = store.add("s", Tensor::full(&[n], T::of(spec.s_init)));
    let mut adam = Adam::new(AdamConfig::with_lr(spec.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let beta = beta_at(epoch, spec.epochs, spec.beta_max);
        order.shuffle(&mut rng);
        let (mut tot, mut tot_ce, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(spec.batch_size) {
            let samples: Vec<&EncodedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = model.make_batch(&samples)?;
            let (target, weights) = cached_targets::<T>(cache, chunk, &batch)?;
            let mut tape = Tape::new();
            let terms = mask_loss(
                &mut tape,
                model,
                store.value(sid),
                beta,
                spec.lambda,
                &fill,
                &batch,
                &target,
                &weights,
            )?;
            let lv = tape.value(terms.loss).item().f64();
            if !lv.is_finite() {
                return Err(Error::DivergenceDetected(format!(
                    "mask loss {} at epoch {}",
                    lv, epoch
                )));
            }
            let grads = tape.backward(terms.loss)?;
            let g = grads
                .get(terms.s)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[n]));
            store.get_mut(sid).grad = g;
            adam.step(&mut store);
            tot += lv;
            tot_ce += tape.value(terms.cross_entropy).item().f64();
            steps += 1;
        }
        let gate_mass = store
            .value(sid)
            .data()
            .iter()
            .map(|v| sigmoid(beta * v.f64()))
            .sum();
        history.push(MaskEpoch {
            epoch,
            beta,
            loss: tot / steps as f64,
            cross_entropy: tot_ce / steps as f64,
            gate_mass,
        });
    }
    Ok(MaskParams {
        s: store.value(sid).to_f64_vec(),
        beta: spec.beta_max,
        epochs: spec.epochs,
        history,
    })
}

impl Circuit {
    /// Verifies that this circuit was discovered on `model`.
    pub fn check_bound<T: Real>(&self, model: &TransformerModel<T>) -> Result<()> {
        let map = model.site_map();
        if self.mask.len() != map.len() || self.site_map != map.descriptor() {
            return Err(Error::SiteMapMismatch(format!(
                "circuit over {} ({} sites), model is {} ({} sites)",
                self.site_map,
                self.mask.len(),
                map.descriptor(),
                map.len()
            )));
        }
        if self.ablation.values.len() != map.len() {
            return Err(Error::SiteMapMismatch("ablation vector length".into()));
        }
        Ok(())
    }

    /// Like [`check_bound`](Self::check_bound) and additionally compares the model hash.
    pub fn check_model<T: Real>(&self, model: &TransformerModel<T>, model_hash: &str) -> Result<()> {
        self.check_bound(model)?;
        if self.model_hash != model_hash {
            return Err(Error::SiteMapMismatch(format!(
                "circuit belongs to model {}, not {}",
                short(&self.model_hash),
                short(model_hash)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Teacher-forced logits with the circuit applied as an exact mask.
pub fn apply_hard_mask<T: Real>(model: &TransformerModel<T>, circuit: &Circuit, batch: &Batch) -> Result<Tensor<T>> {
    circuit.check_bound(model)?;
    let fill = circuit.ablation.fill::<T>();
    let hook = HardMask::new(&circuit.mask, &fill, model.config.d_model)?;
    model.logits(batch, &hook)
}

/// Greedy decoding with the circuit applied.
pub fn decode_with_circuit<T: Real>(model: &TransformerModel<T>, circuit: &Circuit, srcs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
    circuit.check_bound(model)?;
    let fill = circuit.ablation.fill::<T>();
    let hook = HardMask::new(&circuit.mask, &fill, model.config.d_model)?;
    model.greedy_decode(srcs, &hook)
}

/// `metric(natural run) − metric(run with site := value)`.
pub fn indirect_effect<T: Real>(
    model: &TransformerModel<T>,
    site: usize,
    batch: &Batch,
    value: T,
    metric: impl Fn(&Tensor<T>) -> f64,
) -> Result<f64> {
    let n = model.site_map().len();
    if site >= n {
        return Err(Error::SiteMapMismatch(format!("site {} of {}", site, n)));
    }
    let natural = metric(&model.logits(batch, &NoHook)?);
    let mut keep = vec![true; n];
    keep[site] = false;
    let mut fill = vec![T::zero(); n];
    fill[site] = value;
    let hook = HardMask::new(&keep, &fill, model.config.d_model)?;
    let intervened = metric(&model.logits(batch, &hook as &dyn Intervention<T>)?);
    Ok(natural - intervened)
}

#[cfg(test)]
mod tests;
