// SPDX-License-Identifier: MIT OR Apache-2.0
//! Checks against planted ground truth.
//!
//! Each check builds a [`synthlab`](crate::synthlab) population whose
//! dictionaries, rotations and readout are known, runs the ordinary
//! pipeline on it and compares against thresholds.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::alignment::align;
use crate::directions::{dictionaries, MIN_SAMPLES};
use crate::editing::{
    evaluate_layer, DirectionSource, EditConfig, EditMode, LabeledPrompt, LayerSetup, Scales,
};
use crate::rng::derive_seed;
use crate::stats::{Count, RateSummary};
use crate::synthlab::{linear_readout_subject, plant, PlantSpec};
use crate::task::Place;
use crate::Result;

/// Worst-case alignment quality over ordered context pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub rank: usize,
    pub noise: f64,
    pub per_cell: usize,
    pub min_cos_proc: f64,
    pub max_relfro: f64,
    pub mean_cos_unaligned: f64,
}

/// Plant a rotated population at `d = 128`, `|V| = 19`, learn dictionaries,
/// align them at the planted rank and report the off-diagonal metrics.
pub fn procrustes_recovery(
    rank: usize,
    noise: f64,
    per_cell: usize,
    seed: u64,
) -> Result<RecoveryReport> {
    let spec = PlantSpec {
        d: 128,
        values: (0..19).collect(),
        rank,
        contexts: vec![0, 1, 2],
        noise,
        per_cell,
        seed,
        ..PlantSpec::default()
    };
    let (states, _) = plant(&spec)?;
    let dicts = dictionaries(
        &states,
        &spec.contexts,
        &spec.values,
        MIN_SAMPLES.min(per_cell),
    )?;
    let bundle = align(&dicts, rank)?;
    let off: Vec<_> = bundle
        .pairs
        .iter()
        .filter(|p| p.from != p.to)
        .map(|p| p.metrics)
        .collect();
    Ok(RecoveryReport {
        rank,
        noise,
        per_cell,
        min_cos_proc: off.iter().map(|m| m.cos_proc).fold(f64::INFINITY, f64::min),
        max_relfro: off.iter().map(|m| m.relfro).fold(0.0, f64::max),
        mean_cos_unaligned: off.iter().map(|m| m.cos_unaligned).sum::<f64>() / off.len() as f64,
    })
}

/// Strict success per mode on the linear-readout subject.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditingReport {
    pub n_values: usize,
    pub rates: BTreeMap<EditMode, RateSummary>,
}

impl EditingReport {
    pub fn rate(&self, mode: EditMode) -> f64 {
        self.rates.get(&mode).map_or(f64::NAN, |s| s.rate)
    }

    /// Smallest per-mode trial count.
    pub fn min_trials(&self) -> u64 {
        self.rates.values().map(|s| s.n).min().unwrap_or(0)
    }
}

/// Ones-digit edits on a subject whose contexts differ by a large planted
/// rotation, at calibrated scales `α_s = β_s = 1`: the full source component
/// is removed and the full target component added.
pub fn editing_oracle(n_prompts: usize, seed: u64) -> Result<EditingReport> {
    let spec = PlantSpec {
        d: 64,
        values: (0..10).collect(),
        rank: 8,
        contexts: vec![0, 1, 2],
        angle: 2.5,
        noise: 0.01,
        per_cell: 40,
        seed,
        ..PlantSpec::default()
    };
    let (states, planted) = plant(&spec)?;
    let dicts = dictionaries(&states, &spec.contexts, &spec.values, MIN_SAMPLES)?;
    let bundle = align(&dicts, spec.rank)?;
    let subject = linear_readout_subject(&planted, Place::Ones)?;
    let prompts: Vec<LabeledPrompt> = (0..n_prompts as u64)
        .map(|i| {
            let (c, v) = (1 + (i / 10 % 2) as i64, (i % 10) as i64);
            // Fresh noise draws, disjoint from the ones the dictionaries saw.
            let idx = 1_000_000 + i;
            Ok(LabeledPrompt {
                id: i,
                tokens: subject.prompt(c, v, idx)?,
                gold: subject.answer_for(v),
                context: c,
                value: v,
            })
        })
        .collect::<Result<_>>()?;
    let setup = LayerSetup {
        source: DirectionSource {
            dicts: &dicts,
            bundle: &bundle,
            c_ref: 0,
        },
        place: Place::Ones,
        layer: 0,
        seed: derive_seed(seed, "editing-oracle", 0),
    };
    let config = EditConfig {
        grid: vec![Scales::Calibrated {
            alpha_s: 1.0,
            beta_s: 1.0,
        }],
        seed,
        ..EditConfig::default()
    };
    let result = evaluate_layer(&subject, &prompts, setup, &config)?;
    let mut counts: BTreeMap<EditMode, Count> = BTreeMap::new();
    for r in &result.records {
        counts.entry(r.mode).or_default().record(r.strict);
    }
    Ok(EditingReport {
        n_values: spec.values.len(),
        rates: counts
            .into_iter()
            .map(|(m, c)| Ok((m, c.summary()?)))
            .collect::<Result<_>>()?,
    })
}

/// One named pass/fail outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Exact recovery at zero noise.
pub const EXACT_TOL: f64 = 1e-6;
/// Noisy recovery bounds at 500 samples per cell.
pub const NOISY_COS_MIN: f64 = 0.99;
pub const NOISY_RELFRO_MAX: f64 = 0.05;
/// Transfer must not reach this on a large planted rotation.
pub const TRANSFER_MAX: f64 = 0.20;
/// Slack above chance for the random-rotation and wrong-context controls.
pub const CONTROL_SLACK: f64 = 0.05;

pub fn recovery_checks(noise: f64, per_cell: usize, seed: u64) -> Result<Vec<Check>> {
    [5, 8, 12]
        .into_iter()
        .map(|r| {
            let rep = procrustes_recovery(r, noise, per_cell, seed)?;
            let passed = if noise == 0.0 {
                rep.min_cos_proc >= 1.0 - EXACT_TOL && rep.max_relfro <= EXACT_TOL
            } else {
                rep.min_cos_proc >= NOISY_COS_MIN && rep.max_relfro <= NOISY_RELFRO_MAX
            };
            Ok(Check::new(
                format!("procrustes r={r} noise={noise}"),
                passed,
                format!(
                    "cos_proc >= {:.9}, relfro <= {:.3e}, unaligned {:.4}",
                    rep.min_cos_proc, rep.max_relfro, rep.mean_cos_unaligned
                ),
            ))
        })
        .collect()
}

pub fn editing_checks(seed: u64) -> Result<Vec<Check>> {
    let rep = editing_oracle(160, seed)?;
    let chance = 1.0 / rep.n_values as f64;
    let detail = |m: EditMode| format!("{m} {:.4} over {} trials", rep.rate(m), rep.rates[&m].n);
    let mut checks = vec![Check::new(
        "editing trials >= 1000",
        rep.min_trials() >= 1000,
        format!("{} per mode", rep.min_trials()),
    )];
    for m in [EditMode::Direct, EditMode::Rotated] {
        checks.push(Check::new(
            format!("editing {m} = 1"),
            rep.rate(m) == 1.0,
            detail(m),
        ));
    }
    checks.push(Check::new(
        "editing transfer <= 0.20",
        rep.rate(EditMode::Transfer) <= TRANSFER_MAX,
        detail(EditMode::Transfer),
    ));
    for m in [EditMode::RandomR, EditMode::WrongCondition] {
        checks.push(Check::new(
            format!("editing {m} <= chance + {CONTROL_SLACK}"),
            rep.rate(m) <= chance + CONTROL_SLACK,
            detail(m),
        ));
    }
    Ok(checks)
}

/// The full planted-structure suite.
pub fn synth_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = recovery_checks(0.0, 64, seed)?;
    checks.extend(recovery_checks(0.05, 500, seed)?);
    checks.extend(editing_checks(seed)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_recovery_is_exact() {
        let rep = procrustes_recovery(5, 0.0, 40, 3).unwrap();
        assert!(rep.min_cos_proc >= 1.0 - EXACT_TOL, "{rep:?}");
        assert!(rep.max_relfro <= EXACT_TOL, "{rep:?}");
        assert!(rep.mean_cos_unaligned < 0.99, "{rep:?}");
    }

    #[test]
    fn editing_oracle_orders_modes() {
        let checks = editing_checks(11).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }
}
