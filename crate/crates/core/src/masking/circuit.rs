use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainSpec;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Real, Tensor};

pub const CIRCUIT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Zero,
    Mean,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AblationKind::Zero),
            "mean" => Ok(AblationKind::Mean),
            other => Err(Error::InvalidConfig(format!("unknown ablation `{}`", other))),
        }
    }
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationKind::Zero => "zero",
            AblationKind::Mean => "mean",
        })
    }
}

/// Values written into pruned sites.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub kind: AblationKind,
    /// One value per site; all zero for [`AblationKind::Zero`].
    pub values: Vec<f32>,
    /// Task whose data produced the mean.
    pub task: Option<String>,
    pub dataset_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct MeanMeta {
    kind: String,
    task: Option<String>,
    dataset_hash: Option<String>,
}

impl AblationSpec {
    pub fn zero(n: usize) -> AblationSpec {
        AblationSpec {
            kind: AblationKind::Zero,
            values: vec![0.0; n],
            task: None,
            dataset_hash: None,
        }
    }

    pub fn fill<T: Real>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::of(v as f64)).collect()
    }

    /// Binary form of a mean vector (checkpoint format, one tensor).
    pub fn mean_bytes(&self) -> Vec<u8> {
        let meta = MeanMeta {
            kind: "mean_ablation".into(),
            task: self.task.clone(),
            dataset_hash: self.dataset_hash.clone(),
        };
        write_checkpoint(&Checkpoint {
            metadata: serde_json::to_string(&meta).expect("serializable"),
            tensors: vec![(
                "mean".into(),
                Tensor::new(&[self.values.len()], self.values.clone()).expect("flat"),
            )],
        })
    }

    pub fn from_mean_bytes(bytes: &[u8]) -> Result<AblationSpec> {
        let ck = read_checkpoint::<f32>(bytes)?;
        let meta: MeanMeta = serde_json::from_str(&ck.metadata)?;
        let (_, t) = ck
            .tensors
            .into_iter()
            .find(|(n, _)| n == "mean")
            .ok_or_else(|| Error::Format("mean file without `mean` tensor".into()))?;
        Ok(AblationSpec {
            kind: AblationKind::Mean,
            values: t.into_data(),
            task: meta.task,
            dataset_hash: meta.dataset_hash,
        })
    }

    /// Content hash of the binary form (empty for zero ablation).
    pub fn content_hash(&self) -> String {
        match self.kind {
            AblationKind::Zero => String::new(),
            AblationKind::Mean => hex::encode(Sha256::digest(self.mean_bytes())),
        }
    }
}

/// How a composite circuit was formed; parent order matters for union.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub op: String,
    pub parents: Vec<String>,
}

/// A binary mask over mediator sites, bound to a model and ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub mask: Vec<bool>,
    pub ablation: AblationSpec,
    pub task: String,
    pub model_hash: String,
    /// [`MediatorSiteMap::descriptor`](crate::model::MediatorSiteMap::descriptor) of the model.
    pub site_map: String,
    pub train_spec: Option<TrainSpec>,
    pub composition: Option<Composition>,
}

#[derive(Serialize, Deserialize)]
struct CircuitFile {
    version: u32,
    task: String,
    n: usize,
    active: usize,
    site_map: String,
    model_hash: String,
    ablation: AblationKind,
    ablation_task: Option<String>,
    mean_file: Option<String>,
    mean_hash: Option<String>,
    train_spec: Option<TrainSpec>,
    parents: Option<Composition>,
    mask: String,
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format(format!("{} mask bytes for {} sites", bytes.len(), n)));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

impl Circuit {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of kept sites `|m|`.
    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn mean_file_name(&self) -> Option<String> {
        (self.ablation.kind == AblationKind::Mean).then(|| format!("mean-{}.bin", self.ablation.content_hash()))
    }

    /// JSON header plus, for mean ablation, the sibling file `(name, bytes)`.
    pub fn to_files(&self) -> (String, Option<(String, Vec<u8>)>) {
        let mean = self
            .mean_file_name()
            .map(|name| (name, self.ablation.mean_bytes()));
        let header = CircuitFile {
            version: CIRCUIT_VERSION,
            task: self.task.clone(),
            n: self.mask.len(),
            active: self.active(),
            site_map: self.site_map.clone(),
            model_hash: self.model_hash.clone(),
            ablation: self.ablation.kind,
            ablation_task: self.ablation.task.clone(),
            mean_file: mean.as_ref().map(|m| m.0.clone()),
            mean_hash: mean.as_ref().map(|_| self.ablation.content_hash()),
            train_spec: self.train_spec.clone(),
            parents: self.composition.clone(),
            mask: STANDARD.encode(pack_bits(&self.mask)),
        };
        let mut json = serde_json::to_string_pretty(&header).expect("serializable");
        json.push('\n');
        (json, mean)
    }

    /// Parses a header; `load_mean` fetches the sibling mean file by name.
    pub fn from_files(json: &str, load_mean: impl FnOnce(&str) -> Result<Vec<u8>>) -> Result<Circuit> {
        let h: CircuitFile = serde_json::from_str(json)?;
        if h.version != CIRCUIT_VERSION {
            return Err(Error::Format(format!("unsupported circuit version {}", h.version)));
        }
        let bytes = STANDARD
            .decode(h.mask.as_bytes())
            .map_err(|e| Error::Format(format!("mask is not base64: {}", e)))?;
        let mask = unpack_bits(&bytes, h.n)?;
        let ablation = match h.ablation {
            AblationKind::Zero => AblationSpec::zero(h.n),
            AblationKind::Mean => {
                let name = h
                    .mean_file
                    .as_deref()
                    .ok_or_else(|| Error::Format("mean-ablated circuit without mean file".into()))?;
                let bytes = load_mean(name)?;
                let found = hex::encode(Sha256::digest(&bytes));
                if h.mean_hash.as_deref() != Some(found.as_str()) {
                    return Err(Error::Format(format!("mean file {} has hash {}", name, found)));
                }
                let a = AblationSpec::from_mean_bytes(&bytes)?;
                if a.values.len() != h.n {
                    return Err(Error::SiteMapMismatch(format!(
                        "mean vector has {} values for {} sites",
                        a.values.len(),
                        h.n
                    )));
                }
                a
            }
        };
        Ok(Circuit {
            mask,
            ablation,
            task: h.task,
            model_hash: h.model_hash,
            site_map: h.site_map,
            train_spec: h.train_spec,
            composition: h.parents,
        })
    }

    /// Writes the header to `path` and any mean file next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (json, mean) = self.to_files();
        if let Some((name, bytes)) = mean {
            let p = path.parent().unwrap_or(Path::new(".")).join(name);
            if fs::read(&p).ok().as_deref() != Some(bytes.as_slice()) {
                fs::write(p, bytes)?;
            }
        }
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Circuit> {
        let json = fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Circuit::from_files(&json, |name| Ok(fs::read(dir.join(name))?))
    }
}
