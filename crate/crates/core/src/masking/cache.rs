use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, Arch, EncodedSample, NoHook, TransformerModel};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Real, Tensor};

/// Base-model output distributions for every position of every sample,
/// keyed by the model and dataset they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputCache {
    model_hash: String,
    dataset_hash: String,
    vocab: usize,
    offsets: Vec<usize>,
    probs: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    kind: String,
    model_hash: String,
    dataset_hash: String,
    vocab: usize,
    offsets: Vec<usize>,
}

impl OutputCache {
    pub fn build<T: Real>(
        model: &TransformerModel<T>,
        data: &[EncodedSample],
        batch_size: usize,
    ) -> Result<OutputCache> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let vocab = model.config.tgt_vocab;
        let mut offsets = vec![0];
        let mut probs = Vec::new();
        for chunk in data.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedSample> = chunk.iter().collect();
            let batch = model.make_batch(&refs)?;
            let rows = softmax_rows(&model.logits(&batch, &NoHook)?);
            for (i, s) in chunk.iter().enumerate() {
                let len = match model.config.arch {
                    Arch::EncoderDecoder => s.tgt.len() + 1,
                    Arch::DecoderOnlyBidirectional => s.tgt.len(),
                };
                for r in 0..len {
                    probs.extend(rows[i * batch.tgt_len + r].iter().map(|&p| p as f32));
                }
                offsets.push(probs.len());
            }
        }
        Ok(OutputCache {
            model_hash: model.hash(),
            dataset_hash: super::dataset_hash(data),
            vocab,
            offsets,
            probs,
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened `[positions, vocab]` probabilities of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        &self.probs[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn check(&self, model_hash: &str, dataset_hash: &str) -> Result<()> {
        if self.model_hash != model_hash {
            return Err(Error::CacheMismatch(format!(
                "cache built for model {}, got {}",
                self.model_hash, model_hash
            )));
        }
        if self.dataset_hash != dataset_hash {
            return Err(Error::CacheMismatch(format!(
                "cache built for dataset {}, got {}",
                self.dataset_hash, dataset_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CacheMeta {
            kind: "output_cache".into(),
            model_hash: self.model_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            vocab: self.vocab,
            offsets: self.offsets.clone(),
        };
        let probs = Tensor::new(&[self.probs.len()], self.probs.clone()).expect("flat");
        write_checkpoint(&Checkpoint {
            metadata: serde_json::to_string(&meta).expect("serializable"),
            tensors: vec![("probs".into(), probs)],
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<OutputCache> {
        let ck = read_checkpoint::<f32>(bytes)?;
        let meta: CacheMeta = serde_json::from_str(&ck.metadata)?;
        let probs = ck
            .tensors
            .into_iter()
            .find(|(n, _)| n == "probs")
            .ok_or_else(|| Error::Format("cache without probabilities".into()))?
            .1
            .into_data();
        if meta.kind != "output_cache" || meta.offsets.last() != Some(&probs.len()) {
            return Err(Error::Format("inconsistent output cache".into()));
        }
        Ok(OutputCache {
            model_hash: meta.model_hash,
            dataset_hash: meta.dataset_hash,
            vocab: meta.vocab,
            offsets: meta.offsets,
            probs,
        })
    }
}
