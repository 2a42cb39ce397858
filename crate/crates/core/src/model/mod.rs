// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subject models: the contract every backend honors, intervention plans and
//! the built-in toy transformer.
//!
//! Layers are 0-based here: layer `i` is the `resid_post` output of block `i`.
//! Reports convert to 1-based indices.

mod checkpoint;
mod config;
mod toy;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use toy::ToyTransformer;
pub use train::{
    train_toy, training_split, TrainHyper, TrainReport, DEFAULT_HELDOUT_SIZE, DEFAULT_TRAIN_SIZE,
};

use crate::error::{Error, Result};
use crate::task::Answer;

/// Backend-independent model metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n_layers: usize,
    pub d_model: usize,
    /// Stable identity of the weights (used for cache keys and manifests).
    pub identity: String,
}

/// A residual write at `(layer, position)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualWrite {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Interventions applied during a single forward pass.
///
/// Per layer: attention (zeroed if listed in `attn_zero`), residual add, MLP,
/// residual add, then `overwrites`, then `deltas`, then captures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub overwrites: Vec<ResidualWrite>,
    pub deltas: Vec<ResidualWrite>,
    pub attn_zero: BTreeSet<usize>,
}

impl InterventionPlan {
    pub fn is_empty(&self) -> bool {
        self.overwrites.is_empty() && self.deltas.is_empty() && self.attn_zero.is_empty()
    }

    pub fn overwrite(mut self, layer: usize, position: usize, vector: Vec<f32>) -> Self {
        self.overwrites.push(ResidualWrite {
            layer,
            position,
            vector,
        });
        self
    }

    pub fn delta(mut self, layer: usize, position: usize, vector: Vec<f32>) -> Self {
        self.deltas.push(ResidualWrite {
            layer,
            position,
            vector,
        });
        self
    }

    pub fn zero_attention(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.attn_zero.extend(layers);
        self
    }

    /// Check the plan against a model shape and prompt length.
    pub fn validate(&self, n_layers: usize, d_model: usize, seq_len: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (kind, writes) in [("overwrite", &self.overwrites), ("delta", &self.deltas)] {
            for w in writes {
                if w.layer >= n_layers {
                    return Err(Error::OutOfRange(format!(
                        "{kind} layer {} of {n_layers}",
                        w.layer
                    )));
                }
                if w.position >= seq_len {
                    return Err(Error::OutOfRange(format!(
                        "{kind} position {} in a {seq_len}-token prompt",
                        w.position
                    )));
                }
                if w.vector.len() != d_model {
                    return Err(Error::Shape(format!(
                        "{kind} vector of length {} for d_model {d_model}",
                        w.vector.len()
                    )));
                }
                if w.vector.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "{kind} vector at layer {}",
                        w.layer
                    )));
                }
                if kind == "overwrite" && !seen.insert((w.layer, w.position)) {
                    return Err(Error::InvalidArgument(format!(
                        "two overwrites at layer {}, position {}",
                        w.layer, w.position
                    )));
                }
            }
        }
        if let Some(&l) = self.attn_zero.iter().find(|&&l| l >= n_layers) {
            return Err(Error::OutOfRange(format!(
                "attn_zero layer {l} of {n_layers}"
            )));
        }
        Ok(())
    }

    /// Writes targeting one layer, overwrites first.
    pub(crate) fn writes_at(&self, layer: usize) -> (Vec<&ResidualWrite>, Vec<&ResidualWrite>) {
        (
            self.overwrites
                .iter()
                .filter(|w| w.layer == layer)
                .collect(),
            self.deltas.iter().filter(|w| w.layer == layer).collect(),
        )
    }
}

/// What one forward pass observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// `resid_post` after interventions, keyed by `(layer, position)`.
    #[serde(with = "capture_list")]
    pub captures: BTreeMap<(usize, usize), Vec<f32>>,
    /// Greedy next token.
    pub decoded_token: u32,
    /// One-token readout of `decoded_token`.
    pub answer: Answer,
    pub logits_last: Option<Vec<f32>>,
}

impl ForwardTrace {
    pub fn capture(&self, layer: usize, position: usize) -> Result<&[f32]> {
        self.captures
            .get(&(layer, position))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("no capture at ({layer}, {position})")))
    }
}

mod capture_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        layer: usize,
        position: usize,
        vector: Vec<f32>,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(usize, usize), Vec<f32>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map
            .iter()
            .map(|(&(layer, position), vector)| Entry {
                layer,
                position,
                vector: vector.clone(),
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(usize, usize), Vec<f32>>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter()
            .map(|e| ((e.layer, e.position), e.vector))
            .collect())
    }
}

/// The contract shared by the toy transformer, the synthetic oracle and the
/// bridge client. Analysis code only ever talks to this trait.
pub trait SubjectModel: Send + Sync {
    fn meta(&self) -> ModelMeta;

    /// Tokenize a prompt with the backend's own tokenizer.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;

    /// Run one forward pass with interventions, capturing `resid_post` at the
    /// requested `(layer, position)` pairs.
    fn forward(
        &self,
        tokens: &[u32],
        plan: &InterventionPlan,
        captures: &[(usize, usize)],
    ) -> Result<ForwardTrace>;

    /// Greedy next token with no interventions.
    fn greedy_answer(&self, tokens: &[u32]) -> Result<u32> {
        Ok(self
            .forward(tokens, &InterventionPlan::default(), &[])?
            .decoded_token)
    }
}
