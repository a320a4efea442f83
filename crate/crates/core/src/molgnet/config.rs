use serde::{Deserialize, Serialize};

use crate::chem::FeatureVocab;
use crate::{Error, Result};

/// Which state the GRU output blends with the candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GruBlend {
    /// `h' = (1 - u) * x + u * c`, with `x` the node state entering the step.
    #[default]
    NodeState,
    /// Textbook GRU: `h' = (1 - u) * h + u * c`.
    Hidden,
}

/// Graph-level readout used by the task heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Collection,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MolGNetConfig {
    pub n_layers: usize,
    pub steps_per_layer: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub atom_vocab: usize,
    pub bond_vocab: usize,
    pub segment_vocab: usize,
    pub layer_norm_eps: f64,
    pub gru_blend: GruBlend,
}

impl Default for MolGNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MolGNetConfig {
    /// N = 3, T = 2, d = 64, d_ff = 256, K = 4.
    pub fn desk() -> Self {
        Self::with_dims(3, 2, 64, 4)
    }

    /// N = 5, T = 3, d = 768, d_ff = 3072, K = 12.
    pub fn full_scale() -> Self {
        Self::with_dims(5, 3, 768, 12)
    }

    /// Default vocabularies and `d_ff = 4 d`.
    pub fn with_dims(n_layers: usize, steps_per_layer: usize, hidden: usize, heads: usize) -> Self {
        let vocab = FeatureVocab::default();
        Self {
            n_layers,
            steps_per_layer,
            hidden,
            ffn: 4 * hidden,
            heads,
            atom_vocab: vocab.atom_vocab_size(),
            bond_vocab: vocab.bond_vocab_size(),
            segment_vocab: 3,
            layer_norm_eps: 1e-5,
            gru_blend: GruBlend::NodeState,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.steps_per_layer == 0 {
            return bad("n_layers and steps_per_layer must be at least 1");
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden must be a positive multiple of heads");
        }
        if self.ffn == 0 || self.atom_vocab == 0 || self.bond_vocab == 0 {
            return bad("ffn and vocab sizes must be positive");
        }
        if self.segment_vocab != 3 {
            return bad("segment_vocab must be 3 (first, second, collect)");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }
}
