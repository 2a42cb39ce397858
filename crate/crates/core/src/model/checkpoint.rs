// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy checkpoints: the flat parameter vector as a single-row activation
//! container, with the model config and tensor manifest in the sidecar.

use std::path::Path;

use serde_json::json;

use super::config::ModelConfig;
use super::toy::ToyTransformer;
use crate::container;
use crate::error::{Error, Result};

/// Save weights; returns the content hash.
pub fn save_checkpoint(model: &ToyTransformer, path: &Path) -> Result<String> {
    let tensors: Vec<_> = model
        .layout
        .named
        .iter()
        .map(|(name, span, shape)| json!({"name": name, "offset": span.start, "shape": shape}))
        .collect();
    let meta = json!({
        "kind": "toy-checkpoint",
        "config": model.config,
        "tensors": tensors,
    });
    container::write(path, 1, model.params.len(), &model.params, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyTransformer> {
    let c = container::read(path)?;
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("toy-checkpoint") {
        return Err(Error::Container(format!(
            "{} is not a toy checkpoint",
            path.display()
        )));
    }
    let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
    ToyTransformer::from_parts(config, c.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SubjectModel;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            seed: 9,
            ..ModelConfig::default()
        };
        let m = ToyTransformer::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.rsaf");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.meta(), m.meta());
        let p2 = dir.path().join("toy2.rsaf");
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
