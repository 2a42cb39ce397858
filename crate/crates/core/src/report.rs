// SPDX-License-Identifier: MIT OR Apache-2.0
//! Result tables, record streams and run manifests.
//!
//! Layers are 0-based everywhere in the library and 1-based in every file
//! written here. Floats are written in shortest round-trip form, so identical
//! results give byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::alignment::LayerSummary;
use crate::container::{self, sha256_hex};
use crate::editing::{AggregateRow, Diagnostics, TemplateCurve};
use crate::localization::{AblationResult, PatchMode, PatchResult};
use crate::stats::Count;
use crate::{Error, Result};

/// Serialize rows to CSV bytes with a header line.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

/// Write rows as CSV atomically. Returns the file hash.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<String> {
    let bytes = csv_bytes(rows)?;
    container::write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Write one JSON object per line atomically. Returns the file hash.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<String> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    container::write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Write pretty JSON atomically. Returns the file hash.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    container::write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Per-layer patching curve row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchCurveRow {
    pub layer: usize,
    pub mode: String,
    pub n_total: u64,
    pub successes: u64,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

pub fn patch_curve_rows(results: &[PatchResult]) -> Result<Vec<PatchCurveRow>> {
    results
        .iter()
        .map(|r| {
            let s = r.count.summary()?;
            Ok(PatchCurveRow {
                layer: r.layer + 1,
                mode: r.mode.to_string(),
                n_total: s.n,
                successes: s.successes,
                rate: s.rate,
                wilson_lo: s.wilson_lo,
                wilson_hi: s.wilson_hi,
            })
        })
        .collect()
}

/// Patching summary over a layer range: `layer_range, last_token_strict, non_last_strict`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchRangeRow {
    pub layer_range: String,
    pub last_token_strict: Option<f64>,
    pub non_last_strict: Option<f64>,
}

fn range_label(first: usize, last: usize) -> String {
    if first == last {
        format!("{}", first + 1)
    } else {
        format!("{}-{}", first + 1, last + 1)
    }
}

/// Pool the curves below and from `boundary`; one row over all swept
/// layers when there is no boundary.
pub fn patch_range_rows(
    results: &[PatchResult],
    boundary: Option<usize>,
) -> Result<Vec<PatchRangeRow>> {
    let layers: Vec<usize> = results
        .iter()
        .map(|r| r.layer)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let (Some(&first), Some(&last)) = (layers.first(), layers.last()) else {
        return Err(Error::InvalidArgument("no patch results".into()));
    };
    let ranges = match boundary {
        Some(b) if b > first && b <= last => vec![(first, b - 1), (b, last)],
        _ => vec![(first, last)],
    };
    Ok(ranges
        .into_iter()
        .map(|(lo, hi)| {
            let pooled = |mode: PatchMode| {
                results
                    .iter()
                    .filter(|r| r.mode == mode && (lo..=hi).contains(&r.layer))
                    .map(|r| r.count)
                    .sum::<Count>()
                    .rate()
            };
            PatchRangeRow {
                layer_range: range_label(lo, hi),
                last_token_strict: pooled(PatchMode::LastToken),
                non_last_strict: pooled(PatchMode::NonLast),
            }
        })
        .collect())
}

/// Cumulative ablation row: `ablated_layers, accuracy_pct` plus counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub ablated_layers: String,
    pub accuracy_pct: f64,
    pub n_total: u64,
    pub successes: u64,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

/// A start equal to the model depth is the unablated baseline.
pub fn ablation_rows(results: &[AblationResult], n_layers: usize) -> Result<Vec<AblationRow>> {
    results
        .iter()
        .map(|r| {
            let s = r.count.summary()?;
            let ablated_layers = if r.start_layer >= n_layers {
                "None (baseline)".to_string()
            } else {
                range_label(r.start_layer, n_layers - 1)
            };
            Ok(AblationRow {
                ablated_layers,
                accuracy_pct: 100.0 * s.rate,
                n_total: s.n,
                successes: s.successes,
                rate: s.rate,
                wilson_lo: s.wilson_lo,
                wilson_hi: s.wilson_hi,
            })
        })
        .collect()
}

/// Layerwise alignment summary: mean and std over ordered context pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub layer: usize,
    pub setting: String,
    pub unaligned_mean: f64,
    pub unaligned_std: f64,
    pub procrustes_mean: f64,
    pub procrustes_std: f64,
    pub relfro_mean: f64,
    pub relfro_std: f64,
    pub n_pairs: usize,
}

pub fn alignment_rows(setting: &str, summaries: &[LayerSummary]) -> Vec<AlignmentRow> {
    summaries
        .iter()
        .map(|s| AlignmentRow {
            layer: s.layer + 1,
            setting: setting.to_string(),
            unaligned_mean: s.unaligned.0,
            unaligned_std: s.unaligned.1,
            procrustes_mean: s.procrustes.0,
            procrustes_std: s.procrustes.1,
            relfro_mean: s.relfro.0,
            relfro_std: s.relfro.1,
            n_pairs: s.n_pairs,
        })
        .collect()
}

/// Edit success row. `layer` is empty when pooled over layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditRow {
    pub mode: String,
    pub layer: Option<usize>,
    pub n_total: u64,
    pub successes: u64,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub delta_bucket: Option<u32>,
}

pub fn edit_rows(rows: &[AggregateRow]) -> Vec<EditRow> {
    rows.iter()
        .map(|r| EditRow {
            mode: r.mode.to_string(),
            layer: r.layer.map(|l| l + 1),
            n_total: r.summary.n,
            successes: r.summary.successes,
            rate: r.summary.rate,
            wilson_lo: r.summary.wilson_lo,
            wilson_hi: r.summary.wilson_hi,
            delta_bucket: r.delta_bucket,
        })
        .collect()
}

/// Parse and preservation rates per `(mode, layer)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsRow {
    pub mode: String,
    pub layer: usize,
    pub parse_n: u64,
    pub parse_rate: f64,
    pub parse_lo: f64,
    pub parse_hi: f64,
    pub preserve_n: Option<u64>,
    pub preserve_rate: Option<f64>,
    pub preserve_lo: Option<f64>,
    pub preserve_hi: Option<f64>,
}

pub fn diagnostics_rows(diags: &[Diagnostics]) -> Vec<DiagnosticsRow> {
    diags
        .iter()
        .map(|d| DiagnosticsRow {
            mode: d.mode.to_string(),
            layer: d.layer + 1,
            parse_n: d.parse.n,
            parse_rate: d.parse.rate,
            parse_lo: d.parse.wilson_lo,
            parse_hi: d.parse.wilson_hi,
            preserve_n: d.preserve.map(|p| p.n),
            preserve_rate: d.preserve.map(|p| p.rate),
            preserve_lo: d.preserve.map(|p| p.wilson_lo),
            preserve_hi: d.preserve.map(|p| p.wilson_hi),
        })
        .collect()
}

/// Transport curve row; the baseline row of each template has mode `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportRow {
    pub template: String,
    pub mode: String,
    pub layer: Option<usize>,
    pub n_total: u64,
    pub successes: u64,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

pub fn transport_rows(curves: &[TemplateCurve]) -> Vec<TransportRow> {
    let mut rows = Vec::new();
    for c in curves {
        rows.push(TransportRow {
            template: c.template_id.clone(),
            mode: "baseline".into(),
            layer: None,
            n_total: c.baseline.n,
            successes: c.baseline.successes,
            rate: c.baseline.rate,
            wilson_lo: c.baseline.wilson_lo,
            wilson_hi: c.baseline.wilson_hi,
        });
        rows.extend(c.curve.iter().map(|r| TransportRow {
            template: c.template_id.clone(),
            mode: r.mode.to_string(),
            layer: r.layer.map(|l| l + 1),
            n_total: r.summary.n,
            successes: r.summary.successes,
            rate: r.summary.rate,
            wilson_lo: r.summary.wilson_lo,
            wilson_hi: r.summary.wilson_hi,
        }));
    }
    rows
}

/// Everything needed to reproduce a run's outputs. Carries no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to content hash.
    pub outputs: BTreeMap<String, String>,
    /// Derived quantities a reader needs to interpret the outputs.
    pub notes: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Result<Self> {
        let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Self {
            tool: "residforge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: serde_json::Value::Null,
        })
    }

    /// Hash an input file and record it.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn add_output(&mut self, name: &str, hash: String) {
        self.outputs.insert(name.into(), hash);
    }

    pub fn write(&self, dir: &Path) -> Result<String> {
        write_json(&dir.join("manifest.json"), self)
    }
}
