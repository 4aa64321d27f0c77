use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "MHSA")]
    Mhsa,
    #[serde(rename = "MHCA")]
    Mhca,
    #[serde(rename = "FF")]
    Ff,
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        })
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Mhsa => "MHSA",
            Module::Mhca => "MHCA",
            Module::Ff => "FF",
        })
    }
}

/// One maskable neuron at a module output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Site {
    pub stack: Stack,
    pub layer: usize,
    pub module: Module,
    pub neuron: usize,
}

/// Canonical enumeration of all mediator sites. Modules ("blocks") are
/// ordered as they execute: encoder layers (MHSA, FF), then decoder layers
/// (MHSA, MHCA, FF); each block contributes `d_model` consecutive sites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MediatorSiteMap {
    arch: Arch,
    d_model: usize,
    blocks: Vec<(Stack, usize, Module)>,
}

impl MediatorSiteMap {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut blocks = Vec::new();
        for l in 0..cfg.n_enc_layers {
            blocks.push((Stack::Encoder, l, Module::Mhsa));
            blocks.push((Stack::Encoder, l, Module::Ff));
        }
        for l in 0..cfg.n_dec_layers {
            blocks.push((Stack::Decoder, l, Module::Mhsa));
            if cfg.arch == Arch::EncoderDecoder {
                blocks.push((Stack::Decoder, l, Module::Mhca));
            }
            blocks.push((Stack::Decoder, l, Module::Ff));
        }
        MediatorSiteMap {
            arch: cfg.arch,
            d_model: cfg.d_model,
            blocks,
        }
    }

    /// Total number of sites `N`.
    pub fn len(&self) -> usize {
        self.blocks.len() * self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn blocks(&self) -> &[(Stack, usize, Module)] {
        &self.blocks
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        block * self.d_model..(block + 1) * self.d_model
    }

    pub fn site(&self, index: usize) -> Site {
        let (stack, layer, module) = self.blocks[index / self.d_model];
        Site {
            stack,
            layer,
            module,
            neuron: index % self.d_model,
        }
    }

    pub fn index(&self, site: &Site) -> Option<usize> {
        if site.neuron >= self.d_model {
            return None;
        }
        self.blocks
            .iter()
            .position(|&b| b == (site.stack, site.layer, site.module))
            .map(|b| b * self.d_model + site.neuron)
    }

    /// Short text identifying the layout, e.g. `encoder_decoder:e2:d2:w64`.
    pub fn descriptor(&self) -> String {
        let arch = match self.arch {
            Arch::EncoderDecoder => "encoder_decoder",
            Arch::DecoderOnlyBidirectional => "decoder_only",
        };
        let count = |s: Stack| {
            self.blocks
                .iter()
                .filter(|b| b.0 == s)
                .map(|b| b.1 + 1)
                .max()
                .unwrap_or(0)
        };
        format!(
            "{}:e{}:d{}:w{}",
            arch,
            count(Stack::Encoder),
            count(Stack::Decoder),
            self.d_model
        )
    }
}
