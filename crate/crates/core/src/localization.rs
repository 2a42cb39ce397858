// SPDX-License-Identifier: MIT OR Apache-2.0
//! Cross-sample `resid_post` patching, cumulative attention ablation and
//! boundary detection.
//!
//! All layer indices are 0-based. CSV writers convert to 1-based.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InterventionPlan, SubjectModel};
use crate::stats::Count;
use crate::task::{AdditionInstance, Answer, TemplateRegistry};

/// Which positions of the target prompt receive source states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    /// Only the final position.
    LastToken,
    /// Every position except the final one.
    NonLast,
}

impl PatchMode {
    pub fn all() -> [PatchMode; 2] {
        [PatchMode::LastToken, PatchMode::NonLast]
    }

    fn positions(self, seq_len: usize) -> Vec<usize> {
        match self {
            PatchMode::LastToken => vec![seq_len - 1],
            PatchMode::NonLast => (0..seq_len - 1).collect(),
        }
    }
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchMode::LastToken => "last-token",
            PatchMode::NonLast => "non-last",
        })
    }
}

impl std::str::FromStr for PatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-token" | "last" => Ok(PatchMode::LastToken),
            "non-last" => Ok(PatchMode::NonLast),
            _ => Err(Error::InvalidArgument(format!("unknown patch mode {s:?}"))),
        }
    }
}

/// Outcome of one patched forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub src_id: u64,
    pub tgt_id: u64,
    pub layer: usize,
    pub mode: PatchMode,
    pub answer: Answer,
    /// Parsed output equals the source gold sum.
    pub strict: bool,
}

/// Aggregated strict transfer at one `(layer, mode)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub layer: usize,
    pub mode: PatchMode,
    pub count: Count,
}

/// Strict accuracy with attention zeroed in every block from `start_layer` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub start_layer: usize,
    pub count: Count,
}

fn tokens_for(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    inst: &AdditionInstance,
) -> Result<Vec<u32>> {
    model.tokenize(&registry.render_text(inst)?)
}

fn check_layer(model: &dyn SubjectModel, layer: usize) -> Result<()> {
    let n = model.meta().n_layers;
    if layer >= n {
        return Err(Error::OutOfRange(format!(
            "layer {layer} of a {n}-layer model"
        )));
    }
    Ok(())
}

/// Source states for every `(layer, position)` of one prompt.
struct SourceCache {
    tokens: Vec<u32>,
    states: BTreeMap<(usize, usize), Vec<f32>>,
}

fn source_cache(
    model: &dyn SubjectModel,
    tokens: Vec<u32>,
    layers: &[usize],
) -> Result<SourceCache> {
    let spec: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| (0..tokens.len()).map(move |p| (l, p)))
        .collect();
    let trace = model.forward(&tokens, &InterventionPlan::default(), &spec)?;
    Ok(SourceCache {
        tokens,
        states: trace.captures,
    })
}

fn patched_answer(
    model: &dyn SubjectModel,
    src: &SourceCache,
    tgt_tokens: &[u32],
    layer: usize,
    mode: PatchMode,
) -> Result<Answer> {
    if src.tokens.len() != tgt_tokens.len() {
        return Err(Error::Shape(format!(
            "source has {} tokens, target has {}",
            src.tokens.len(),
            tgt_tokens.len()
        )));
    }
    let mut plan = InterventionPlan::default();
    for p in mode.positions(tgt_tokens.len()) {
        let v = src.states.get(&(layer, p)).ok_or_else(|| {
            Error::InvalidArgument(format!("missing source state ({layer}, {p})"))
        })?;
        plan = plan.overwrite(layer, p, v.clone());
    }
    Ok(model.forward(tgt_tokens, &plan, &[])?.answer)
}

/// Run the target prompt with source `resid_post` states written in at
/// `layer`. Success means the parsed output equals the source sum.
pub fn cross_sample_patch(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    src: &AdditionInstance,
    tgt: &AdditionInstance,
    layer: usize,
    mode: PatchMode,
) -> Result<PatchRecord> {
    check_layer(model, layer)?;
    let cache = source_cache(model, tokens_for(model, registry, src)?, &[layer])?;
    let tgt_tokens = tokens_for(model, registry, tgt)?;
    let answer = patched_answer(model, &cache, &tgt_tokens, layer, mode)?;
    Ok(PatchRecord {
        src_id: src.id,
        tgt_id: tgt.id,
        layer,
        mode,
        answer,
        strict: answer == Answer::Value(src.s),
    })
}

/// Patch every pair at every `(layer, mode)`. Returns aggregates ordered by
/// layer then mode, plus the per-pair records in the same order per pair.
pub fn patch_sweep(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    pairs: &[(AdditionInstance, AdditionInstance)],
    layers: &[usize],
    modes: &[PatchMode],
) -> Result<(Vec<PatchResult>, Vec<PatchRecord>)> {
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples(
            "patch sweep needs at least one pair".into(),
        ));
    }
    for &l in layers {
        check_layer(model, l)?;
    }
    let per_pair: Vec<Vec<PatchRecord>> = pairs
        .par_iter()
        .map(|(src, tgt)| {
            let cache = source_cache(model, tokens_for(model, registry, src)?, layers)?;
            let tgt_tokens = tokens_for(model, registry, tgt)?;
            let mut out = Vec::with_capacity(layers.len() * modes.len());
            for &layer in layers {
                for &mode in modes {
                    let answer = patched_answer(model, &cache, &tgt_tokens, layer, mode)?;
                    out.push(PatchRecord {
                        src_id: src.id,
                        tgt_id: tgt.id,
                        layer,
                        mode,
                        answer,
                        strict: answer == Answer::Value(src.s),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<PatchRecord> = per_pair.into_iter().flatten().collect();
    Ok((aggregate_patches(&records), records))
}

/// Pool per-pair records into `(layer, mode)` counts.
pub fn aggregate_patches(records: &[PatchRecord]) -> Vec<PatchResult> {
    let mut counts: BTreeMap<(usize, PatchMode), Count> = BTreeMap::new();
    for r in records {
        counts
            .entry((r.layer, r.mode))
            .or_default()
            .record(r.strict);
    }
    counts
        .into_iter()
        .map(|((layer, mode), count)| PatchResult { layer, mode, count })
        .collect()
}

/// Strict accuracy with attention zeroed in blocks `start_layer..n_layers`.
/// `start_layer == n_layers` ablates nothing.
pub fn attn_ablate(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    instances: &[AdditionInstance],
    start_layer: usize,
) -> Result<AblationResult> {
    let n_layers = model.meta().n_layers;
    if start_layer > n_layers {
        return Err(Error::OutOfRange(format!(
            "ablation start {start_layer} of a {n_layers}-layer model"
        )));
    }
    let plan = InterventionPlan::default().zero_attention(start_layer..n_layers);
    let flags: Vec<bool> = instances
        .par_iter()
        .map(|inst| {
            let tokens = tokens_for(model, registry, inst)?;
            Ok(model.forward(&tokens, &plan, &[])?.answer == Answer::Value(inst.s))
        })
        .collect::<Result<_>>()?;
    let mut count = Count::default();
    flags.into_iter().for_each(|f| count.record(f));
    Ok(AblationResult { start_layer, count })
}

/// [`attn_ablate`] for each start layer.
pub fn ablation_sweep(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    instances: &[AdditionInstance],
    starts: &[usize],
) -> Result<Vec<AblationResult>> {
    starts
        .iter()
        .map(|&s| attn_ablate(model, registry, instances, s))
        .collect()
}

/// Default boundary thresholds.
pub const TAU_HI: f64 = 0.9;
pub const TAU_LO: f64 = 0.1;

/// Smallest layer from which last-token transfer stays `≥ tau_hi` and
/// non-last transfer stays `≤ tau_lo` through the deepest swept layer.
///
/// Layers missing either curve are treated as not satisfying the rule.
pub fn detect_boundary(results: &[PatchResult], tau_hi: f64, tau_lo: f64) -> Result<Option<usize>> {
    let mut last: BTreeMap<usize, f64> = BTreeMap::new();
    let mut non_last: BTreeMap<usize, f64> = BTreeMap::new();
    for r in results {
        let Some(rate) = r.count.rate() else { continue };
        match r.mode {
            PatchMode::LastToken => last.insert(r.layer, rate),
            PatchMode::NonLast => non_last.insert(r.layer, rate),
        };
    }
    let layers: Vec<usize> = last
        .keys()
        .chain(non_last.keys())
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if layers.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::InvalidArgument(
            "boundary detection needs contiguous layers".into(),
        ));
    }
    let mut boundary = None;
    for &l in layers.iter().rev() {
        let ok = matches!((last.get(&l), non_last.get(&l)), (Some(&a), Some(&b)) if a >= tau_hi && b <= tau_lo);
        if !ok {
            break;
        }
        boundary = Some(l);
    }
    Ok(boundary)
}
