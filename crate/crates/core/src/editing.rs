// SPDX-License-Identifier: MIT OR Apache-2.0
//! Strict counterfactual digit edits.
//!
//! An edit replaces the digit `v` at place `p` of the answer by `v′` with a
//! remove-and-add translation of the last-position state at one layer:
//! `h′ = h − β·û(v) + α·û(v′)`. Success is strict: the one-token readout must
//! equal `s + (v′ − v)·10^p`.
//!
//! Five direction sources are compared: directions learned in the evaluation
//! context (`direct`), reference-context directions as is (`transfer`),
//! reference directions rotated into the evaluation context (`rotated`), and
//! two controls, a mismatched rotator (`wrong-condition`) and a random
//! orthogonal map (`random-r`).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{rotate_direction, AlignmentBundle};
use crate::directions::{DirectionDictionary, Setting};
use crate::error::{Error, Result};
use crate::model::{InterventionPlan, SubjectModel};
use crate::numerics::random_orthogonal;
use crate::rng::{derive_seed, stream};
use crate::stats::{Count, RateSummary};
use crate::task::{AdditionInstance, Answer, Place, TemplateRegistry, MAX_INT_TOKEN};

/// Smallest and largest valid counterfactual target.
pub const TARGET_RANGE: (u32, u32) = (100, MAX_INT_TOKEN);

/// Default dimensionless scale grid for both `α_s` and `β_s`.
pub const DEFAULT_SCALE_GRID: [f64; 2] = [0.5, 1.0];

/// Default number of anchor edit pairs used for scale selection.
pub const DEFAULT_ANCHORS: usize = 8;

/// `s + (v′ − v)·10^p`, or `OutOfRange` when it leaves [`TARGET_RANGE`].
pub fn strict_target(s: u32, place: Place, v: i64, v_new: i64) -> Result<u32> {
    if place.digit_of(s) as i64 != v {
        return Err(Error::InvalidArgument(format!(
            "{s} has {place} digit {}, not {v}",
            place.digit_of(s)
        )));
    }
    if !(0..=9).contains(&v_new) {
        return Err(Error::InvalidArgument(format!("target digit {v_new}")));
    }
    let target = s as i64 + (v_new - v) * place.weight();
    if target < TARGET_RANGE.0 as i64 || target > TARGET_RANGE.1 as i64 {
        return Err(Error::OutOfRange(format!("counterfactual target {target}")));
    }
    Ok(target as u32)
}

/// Digits of `n` at ones, tens, hundreds and thousands.
fn digits(n: u32) -> [u32; 4] {
    [n % 10, n / 10 % 10, n / 100 % 10, n / 1000 % 10]
}

/// Every digit of `parsed` other than the one at `place` matches `gold`.
pub fn preserves_other_digits(parsed: u32, gold: u32, place: Place) -> bool {
    let skip = place.exponent() as usize;
    let (a, b) = (digits(parsed), digits(gold));
    (0..4).filter(|&i| i != skip).all(|i| a[i] == b[i]) && parsed < 10_000
}

/// Where the edit directions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    Direct,
    Transfer,
    Rotated,
    WrongCondition,
    RandomR,
}

impl EditMode {
    pub fn all() -> [EditMode; 5] {
        [
            EditMode::Direct,
            EditMode::Transfer,
            EditMode::Rotated,
            EditMode::WrongCondition,
            EditMode::RandomR,
        ]
    }
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditMode::Direct => "direct",
            EditMode::Transfer => "transfer",
            EditMode::Rotated => "rotated",
            EditMode::WrongCondition => "wrong-condition",
            EditMode::RandomR => "random-r",
        })
    }
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(EditMode::Direct),
            "transfer" => Ok(EditMode::Transfer),
            "rotated" => Ok(EditMode::Rotated),
            "wrong-condition" => Ok(EditMode::WrongCondition),
            "random-r" => Ok(EditMode::RandomR),
            _ => Err(Error::InvalidArgument(format!("unknown edit mode {s:?}"))),
        }
    }
}

/// Edit strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scales {
    /// `h − β·û(v) + α·û(v′)`.
    Constant { alpha: f64, beta: f64 },
    /// `h − β_s·‖r(v)‖·û(v) + α_s·‖r(v′)‖·û(v′)` with raw DoM norms `‖r‖`.
    Calibrated { alpha_s: f64, beta_s: f64 },
}

impl Scales {
    /// `(β, α)` in state units.
    fn resolve(self, dirs: &EditDirections) -> Result<(f64, f64)> {
        let (beta, alpha) = match self {
            Scales::Constant { alpha, beta } => (beta, alpha),
            Scales::Calibrated { alpha_s, beta_s } => {
                let (Some(rn), Some(an)) = (dirs.remove_norm, dirs.add_norm) else {
                    return Err(Error::InvalidArgument(
                        "calibrated scales need raw DoM norms".into(),
                    ));
                };
                (beta_s * rn, alpha_s * an)
            }
        };
        if !beta.is_finite() || !alpha.is_finite() || beta < 0.0 || alpha < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "edit scales beta={beta}, alpha={alpha}"
            )));
        }
        Ok((beta, alpha))
    }

    fn sum_and_alpha(self) -> (f64, f64) {
        match self {
            Scales::Constant { alpha, beta } => (alpha + beta, alpha),
            Scales::Calibrated { alpha_s, beta_s } => (alpha_s + beta_s, alpha_s),
        }
    }
}

/// Unit remove and add directions with the raw norms used for calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDirections {
    pub remove: Vec<f64>,
    pub add: Vec<f64>,
    pub remove_norm: Option<f64>,
    pub add_norm: Option<f64>,
}

/// A prompt with the labels editing needs. `value` is the true digit of
/// `gold` at the edited place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub gold: u32,
    pub context: i64,
    pub value: i64,
}

/// Tokenize instances and label them under `setting`.
pub fn prompts_from_instances(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    instances: &[AdditionInstance],
    setting: Setting,
) -> Result<Vec<LabeledPrompt>> {
    if setting.place().is_none() {
        return Err(Error::InvalidArgument(format!(
            "setting {setting} has no digit place to edit"
        )));
    }
    instances
        .iter()
        .map(|inst| {
            let (context, value) = setting.label(inst);
            Ok(LabeledPrompt {
                id: inst.id,
                tokens: model.tokenize(&registry.render_text(inst)?)?,
                gold: inst.s,
                context,
                value,
            })
        })
        .collect()
}

/// One edit to evaluate: prompt index plus target digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditJob {
    pub prompt: usize,
    pub target_value: i64,
    pub target: u32,
}

/// All `(prompt, v′ ≠ v)` jobs with an in-range target. At most
/// `max_targets` targets per prompt are kept, chosen by a seeded shuffle.
/// Returns the jobs and how many pairs were excluded for range.
pub fn edit_jobs(
    prompts: &[LabeledPrompt],
    place: Place,
    values: &[i64],
    max_targets: Option<usize>,
    seed: u64,
) -> Result<(Vec<EditJob>, usize)> {
    let mut jobs = Vec::new();
    let mut excluded = 0;
    for (i, p) in prompts.iter().enumerate() {
        let mut row = Vec::new();
        for &v_new in values.iter().filter(|&&w| w != p.value) {
            match strict_target(p.gold, place, p.value, v_new) {
                Ok(target) => row.push(EditJob {
                    prompt: i,
                    target_value: v_new,
                    target,
                }),
                Err(Error::OutOfRange(_)) => excluded += 1,
                Err(e) => return Err(e),
            }
        }
        if let Some(k) = max_targets {
            if row.len() > k {
                row.shuffle(&mut stream(seed, "edit-targets", p.id));
                row.truncate(k);
            }
        }
        jobs.extend(row);
    }
    Ok((jobs, excluded))
}

/// The context used by the wrong-condition control: the one farthest from
/// `c_eval` other than `c_ref` and `c_eval`, ties to the smaller label.
pub fn wrong_context(contexts: &[i64], c_ref: i64, c_eval: i64) -> Result<i64> {
    contexts
        .iter()
        .copied()
        .filter(|&c| c != c_ref && c != c_eval)
        .max_by(|&a, &b| (a - c_eval).abs().cmp(&(b - c_eval).abs()).then(b.cmp(&a)))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no context besides {c_ref} and {c_eval} for the wrong-condition control"
            ))
        })
}

/// What [`mode_directions`] reads from.
#[derive(Debug, Clone, Copy)]
pub struct DirectionSource<'a> {
    pub dicts: &'a BTreeMap<i64, DirectionDictionary>,
    pub bundle: &'a AlignmentBundle,
    pub c_ref: i64,
}

impl DirectionSource<'_> {
    fn dict(&self, c: i64) -> Result<&DirectionDictionary> {
        self.dicts
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("no dictionary for context {c}")))
    }
}

/// Remove and add directions for editing `v → v_new` in context `c_eval`.
///
/// Raw norms come from the dictionary the unit directions were taken from:
/// the evaluation context for `direct`, the reference context otherwise.
/// `seed` drives the random-R control only.
pub fn mode_directions(
    mode: EditMode,
    src: DirectionSource<'_>,
    c_eval: i64,
    v: i64,
    v_new: i64,
    seed: u64,
) -> Result<EditDirections> {
    let ref_dict = src.dict(src.c_ref)?;
    let (u_rm, n_rm) = ref_dict.direction(v)?;
    let (u_add, n_add) = ref_dict.direction(v_new)?;
    let rotate_with = |r: &crate::numerics::Matrix,
                       b_target: &crate::numerics::Matrix|
     -> Result<EditDirections> {
        let b_ref = src.bundle.basis(src.c_ref)?;
        Ok(EditDirections {
            remove: rotate_direction(u_rm, b_ref, r, b_target)?,
            add: rotate_direction(u_add, b_ref, r, b_target)?,
            remove_norm: Some(n_rm),
            add_norm: Some(n_add),
        })
    };
    match mode {
        EditMode::Direct => {
            let d = src.dict(c_eval)?;
            let (a, na) = d.direction(v)?;
            let (b, nb) = d.direction(v_new)?;
            Ok(EditDirections {
                remove: a.to_vec(),
                add: b.to_vec(),
                remove_norm: Some(na),
                add_norm: Some(nb),
            })
        }
        EditMode::Transfer => Ok(EditDirections {
            remove: u_rm.to_vec(),
            add: u_add.to_vec(),
            remove_norm: Some(n_rm),
            add_norm: Some(n_add),
        }),
        EditMode::Rotated => rotate_with(
            src.bundle.rotator(src.c_ref, c_eval)?,
            src.bundle.basis(c_eval)?,
        ),
        EditMode::WrongCondition => {
            let c_wrong = wrong_context(&src.bundle.contexts(), src.c_ref, c_eval)?;
            rotate_with(
                src.bundle.rotator(src.c_ref, c_wrong)?,
                src.bundle.basis(c_eval)?,
            )
        }
        EditMode::RandomR => {
            let r = random_orthogonal(src.bundle.rank, seed);
            rotate_with(&r, src.bundle.basis(c_eval)?)
        }
    }
}

/// Outcome of one edited forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: u64,
    pub context: i64,
    pub mode: EditMode,
    pub layer: usize,
    pub place: Place,
    pub value: i64,
    pub target_value: i64,
    pub target: u32,
    pub decoded: Answer,
    pub parse_ok: bool,
    pub strict: bool,
    /// Only set when the output parsed.
    pub preserve: Option<bool>,
    pub delta_abs: u32,
}

/// What to edit and how hard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub place: Place,
    pub layer: usize,
    pub mode: EditMode,
    pub scales: Scales,
}

/// Apply `h − β·remove + α·add` at the last position of `layer` and decode.
pub fn apply_edit(
    model: &dyn SubjectModel,
    prompt: &LabeledPrompt,
    target_value: i64,
    spec: &EditSpec,
    dirs: &EditDirections,
) -> Result<EvalRecord> {
    let d = model.meta().d_model;
    if dirs.remove.len() != d || dirs.add.len() != d {
        return Err(Error::Shape(format!(
            "edit directions of length {} and {} for d_model {d}",
            dirs.remove.len(),
            dirs.add.len()
        )));
    }
    let target = strict_target(prompt.gold, spec.place, prompt.value, target_value)?;
    let (beta, alpha) = spec.scales.resolve(dirs)?;
    let delta: Vec<f32> = dirs
        .remove
        .iter()
        .zip(&dirs.add)
        .map(|(r, a)| (alpha * a - beta * r) as f32)
        .collect();
    if delta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("edit delta".into()));
    }
    let last = prompt
        .tokens
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidArgument("empty prompt".into()))?;
    let plan = InterventionPlan::default().delta(spec.layer, last, delta);
    let trace = model.forward(&prompt.tokens, &plan, &[])?;
    let parsed = trace.answer.value();
    Ok(EvalRecord {
        instance_id: prompt.id,
        context: prompt.context,
        mode: spec.mode,
        layer: spec.layer,
        place: spec.place,
        value: prompt.value,
        target_value,
        target,
        decoded: trace.answer,
        parse_ok: parsed.is_some(),
        strict: parsed == Some(target),
        preserve: parsed.map(|p| preserves_other_digits(p, prompt.gold, spec.place)),
        delta_abs: (target_value - prompt.value).unsigned_abs() as u32,
    })
}

/// Seed of the random-R control for one job.
fn job_seed(seed: u64, layer: usize, prompt: &LabeledPrompt, target_value: i64) -> u64 {
    derive_seed(
        seed,
        "random-r",
        (prompt.id << 16) ^ ((layer as u64) << 8) ^ target_value as u64,
    )
}

/// Everything fixed while evaluating one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerSetup<'a> {
    pub source: DirectionSource<'a>,
    pub place: Place,
    pub layer: usize,
    pub seed: u64,
}

/// Evaluate `jobs` in one mode with fixed scales.
pub fn run_jobs(
    model: &dyn SubjectModel,
    prompts: &[LabeledPrompt],
    jobs: &[EditJob],
    setup: LayerSetup<'_>,
    mode: EditMode,
    scales: Scales,
) -> Result<Vec<EvalRecord>> {
    let spec = EditSpec {
        place: setup.place,
        layer: setup.layer,
        mode,
        scales,
    };
    jobs.par_iter()
        .map(|job| {
            let p = prompts
                .get(job.prompt)
                .ok_or_else(|| Error::OutOfRange(format!("prompt index {}", job.prompt)))?;
            let seed = job_seed(setup.seed, setup.layer, p, job.target_value);
            let dirs = mode_directions(
                mode,
                setup.source,
                p.context,
                p.value,
                job.target_value,
                seed,
            )?;
            apply_edit(model, p, job.target_value, &spec, &dirs)
        })
        .collect()
}

/// Scale grid over `α_s, β_s` in calibrated form.
pub fn calibrated_grid(values: &[f64]) -> Vec<Scales> {
    values
        .iter()
        .flat_map(|&a| {
            values.iter().map(move |&b| Scales::Calibrated {
                alpha_s: a,
                beta_s: b,
            })
        })
        .collect()
}

/// Pick the grid point with the most anchor successes; ties go to the
/// smaller `α + β`, then the smaller `α`. Returns the choice and every score.
pub fn select_scales(
    grid: &[Scales],
    mut score: impl FnMut(Scales) -> Result<Count>,
) -> Result<(Scales, Vec<(Scales, Count)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty scale grid".into()));
    }
    let scored: Vec<(Scales, Count)> = grid
        .iter()
        .map(|&s| Ok((s, score(s)?)))
        .collect::<Result<_>>()?;
    let best = scored
        .iter()
        .min_by(|(sa, ca), (sb, cb)| {
            let (suma, aa) = sa.sum_and_alpha();
            let (sumb, ab) = sb.sum_and_alpha();
            cb.successes
                .cmp(&ca.successes)
                .then(suma.total_cmp(&sumb))
                .then(aa.total_cmp(&ab))
        })
        .map(|(s, _)| *s)
        .expect("non-empty grid");
    Ok((best, scored))
}

/// Anchor-based scale selection for one mode at one layer.
pub fn select_scales_on_anchors(
    model: &dyn SubjectModel,
    prompts: &[LabeledPrompt],
    anchors: &[EditJob],
    setup: LayerSetup<'_>,
    mode: EditMode,
    grid: &[Scales],
) -> Result<(Scales, Vec<(Scales, Count)>)> {
    if anchors.is_empty() {
        return Err(Error::InsufficientSamples(
            "scale selection needs at least one anchor".into(),
        ));
    }
    select_scales(grid, |s| {
        Ok(run_jobs(model, prompts, anchors, setup, mode, s)?
            .iter()
            .map(|r| Count::new(r.strict as u64, 1))
            .sum())
    })
}

/// Settings of a per-layer editing evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub modes: Vec<EditMode>,
    pub c_ref: i64,
    pub grid: Vec<Scales>,
    pub n_anchors: usize,
    /// Cap on targets per prompt; `None` evaluates every valid `v′`.
    pub max_targets: Option<usize>,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            modes: EditMode::all().to_vec(),
            c_ref: 0,
            grid: calibrated_grid(&DEFAULT_SCALE_GRID),
            n_anchors: DEFAULT_ANCHORS,
            max_targets: None,
            seed: 0,
        }
    }
}

/// Results of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEditResult {
    pub layer: usize,
    pub scales: BTreeMap<EditMode, Scales>,
    pub anchor_scores: BTreeMap<EditMode, Vec<(Scales, Count)>>,
    pub records: Vec<EvalRecord>,
    pub excluded: usize,
    pub anchors: usize,
}

/// Prompts from contexts other than `c_ref` that the bundle covers, split into
/// anchor jobs and evaluation jobs (disjoint), then every mode is scaled on
/// the anchors and evaluated on the rest.
pub fn evaluate_layer(
    model: &dyn SubjectModel,
    prompts: &[LabeledPrompt],
    setup: LayerSetup<'_>,
    config: &EditConfig,
) -> Result<LayerEditResult> {
    let contexts = setup.source.bundle.contexts();
    let eligible: Vec<LabeledPrompt> = prompts
        .iter()
        .filter(|p| p.context != config.c_ref && contexts.contains(&p.context))
        .cloned()
        .collect();
    if eligible.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "no prompts outside the reference context {} among contexts {contexts:?}",
            config.c_ref
        )));
    }
    let values = &setup.source.bundle.values;
    let (mut jobs, excluded) = edit_jobs(
        &eligible,
        setup.place,
        values,
        config.max_targets,
        config.seed,
    )?;
    jobs.shuffle(&mut stream(config.seed, "anchors", setup.layer as u64));
    if jobs.len() <= config.n_anchors {
        return Err(Error::InsufficientSamples(format!(
            "{} edit jobs cannot cover {} anchors plus an evaluation set",
            jobs.len(),
            config.n_anchors
        )));
    }
    let eval = jobs.split_off(config.n_anchors);
    let anchors = jobs;
    let mut scales = BTreeMap::new();
    let mut anchor_scores = BTreeMap::new();
    let mut records = Vec::new();
    for &mode in &config.modes {
        let (chosen, scored) = if config.grid.len() == 1 {
            (config.grid[0], Vec::new())
        } else {
            select_scales_on_anchors(model, &eligible, &anchors, setup, mode, &config.grid)?
        };
        records.extend(run_jobs(model, &eligible, &eval, setup, mode, chosen)?);
        scales.insert(mode, chosen);
        anchor_scores.insert(mode, scored);
    }
    Ok(LayerEditResult {
        layer: setup.layer,
        scales,
        anchor_scores,
        records,
        excluded,
        anchors: anchors.len(),
    })
}

/// One aggregated row: strict success for a mode, at a layer or over a layer
/// set, optionally within one `|Δ|` bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: EditMode,
    pub layer: Option<usize>,
    pub delta_bucket: Option<u32>,
    pub summary: RateSummary,
}

fn rows_from(
    groups: BTreeMap<(EditMode, Option<usize>, Option<u32>), Count>,
) -> Result<Vec<AggregateRow>> {
    groups
        .into_iter()
        .map(|((mode, layer, delta_bucket), c)| {
            Ok(AggregateRow {
                mode,
                layer,
                delta_bucket,
                summary: c.summary()?,
            })
        })
        .collect()
}

/// Strict success per `(mode, layer)`, pooled by count.
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::InsufficientSamples("nothing to aggregate".into()));
    }
    let mut groups: BTreeMap<_, Count> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.mode, Some(r.layer), None))
            .or_default()
            .record(r.strict);
    }
    rows_from(groups)
}

/// Strict success per `(mode, |Δ|)` over `layers` (all layers if `None`).
/// Buckets without records are absent.
pub fn delta_stratified(
    records: &[EvalRecord],
    layers: Option<&[usize]>,
) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<_, Count> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| layers.is_none_or(|ls| ls.contains(&r.layer)))
    {
        groups
            .entry((r.mode, None, Some(r.delta_abs)))
            .or_default()
            .record(r.strict);
    }
    rows_from(groups)
}

/// Parse and preservation rates per `(mode, layer)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mode: EditMode,
    pub layer: usize,
    pub parse: RateSummary,
    /// Among parsed outputs; `None` when nothing parsed.
    pub preserve: Option<RateSummary>,
}

pub fn diagnostics(records: &[EvalRecord]) -> Result<Vec<Diagnostics>> {
    let mut groups: BTreeMap<(EditMode, usize), (Count, Count)> = BTreeMap::new();
    for r in records {
        let (parse, preserve) = groups.entry((r.mode, r.layer)).or_default();
        parse.record(r.parse_ok);
        if let Some(p) = r.preserve {
            preserve.record(p);
        }
    }
    groups
        .into_iter()
        .map(|((mode, layer), (parse, preserve))| {
            Ok(Diagnostics {
                mode,
                layer,
                parse: parse.summary()?,
                preserve: if preserve.total > 0 {
                    Some(preserve.summary()?)
                } else {
                    None
                },
            })
        })
        .collect()
}

/// Directions and alignment fitted at one layer on the canonical template.
#[derive(Debug, Clone)]
pub struct LayerDirections {
    pub dicts: BTreeMap<i64, DirectionDictionary>,
    pub bundle: AlignmentBundle,
}

/// Per-template output of a transport run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateCurve {
    pub template_id: String,
    /// Baseline strict accuracy under this template.
    pub baseline: RateSummary,
    /// Strict success per `(mode, layer)`.
    pub curve: Vec<AggregateRow>,
    pub scales: BTreeMap<usize, BTreeMap<EditMode, Scales>>,
}

/// Evaluate the same interventions, learned once, under each template.
/// Only baseline-correct instances of each template are edited.
pub fn transport_run(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    templates: &[&str],
    instances: &[AdditionInstance],
    setting: Setting,
    learned: &BTreeMap<usize, LayerDirections>,
    config: &EditConfig,
) -> Result<Vec<TemplateCurve>> {
    let place = setting.place().ok_or_else(|| {
        Error::InvalidArgument(format!("setting {setting} has no digit place to edit"))
    })?;
    templates
        .iter()
        .map(|&t| {
            registry.get(t)?;
            let rendered: Vec<AdditionInstance> =
                instances.iter().map(|i| i.with_template(t)).collect();
            let base = crate::task::baseline_filter(model, registry, &rendered)?;
            let prompts = prompts_from_instances(model, registry, &base.correct, setting)?;
            let mut records = Vec::new();
            let mut scales = BTreeMap::new();
            for (&layer, ld) in learned {
                let setup = LayerSetup {
                    source: DirectionSource {
                        dicts: &ld.dicts,
                        bundle: &ld.bundle,
                        c_ref: config.c_ref,
                    },
                    place,
                    layer,
                    seed: config.seed,
                };
                let res = evaluate_layer(model, &prompts, setup, config)?;
                scales.insert(layer, res.scales);
                records.extend(res.records);
            }
            Ok(TemplateCurve {
                template_id: t.to_owned(),
                baseline: base.count.summary()?,
                curve: aggregate(&records)?,
                scales,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::align;
    use crate::directions::dictionaries;
    use crate::synthlab::{linear_readout_subject, plant, PlantSpec, SynthSubject};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_targets() {
        assert_eq!(strict_target(423, Place::Tens, 2, 5).unwrap(), 453);
        assert_eq!(strict_target(250, Place::Hundreds, 2, 4).unwrap(), 450);
        assert_eq!(strict_target(423, Place::Ones, 3, 3).unwrap(), 423);
        assert!(matches!(
            strict_target(150, Place::Hundreds, 1, 0),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            strict_target(423, Place::Tens, 3, 5),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #[test]
        fn target_changes_only_the_edited_digit(s in 100u32..1000, p in 0usize..3, v_new in 0i64..10) {
            let place = Place::all()[p];
            let v = place.digit_of(s) as i64;
            match strict_target(s, place, v, v_new) {
                Ok(t) => {
                    prop_assert_eq!(place.digit_of(t) as i64, v_new);
                    prop_assert!(preserves_other_digits(t, s, place));
                }
                Err(Error::OutOfRange(_)) => prop_assert!(place == Place::Hundreds && v_new == 0),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn wrong_context_is_farthest_and_deterministic() {
        assert_eq!(wrong_context(&[0, 1, 2], 0, 1).unwrap(), 2);
        assert_eq!(wrong_context(&[0, 1, 2, 3, 4, 5], 0, 1).unwrap(), 5);
        // 1 and 5 are both 2 away from 3; the smaller wins.
        assert_eq!(wrong_context(&[0, 1, 3, 5], 0, 3).unwrap(), 1);
        assert!(wrong_context(&[0, 1], 0, 1).is_err());
    }

    #[test]
    fn grid_selection_tie_breaks() {
        let grid = calibrated_grid(&DEFAULT_SCALE_GRID);
        let (s, scored) = select_scales(&grid, |_| Ok(Count::new(0, 8))).unwrap();
        assert_eq!(
            s,
            Scales::Calibrated {
                alpha_s: 0.5,
                beta_s: 0.5
            }
        );
        assert_eq!(scored.len(), 4);
        let (s, _) = select_scales(&grid, |s| {
            Ok(Count::new(
                u64::from(
                    s == Scales::Calibrated {
                        alpha_s: 1.0,
                        beta_s: 1.0,
                    },
                ) * 8,
                8,
            ))
        })
        .unwrap();
        assert_eq!(
            s,
            Scales::Calibrated {
                alpha_s: 1.0,
                beta_s: 1.0
            }
        );
        // Same total: (0.5, 1.0) beats (1.0, 0.5) on the smaller alpha.
        let (s, _) = select_scales(&grid, |s| match s {
            Scales::Calibrated { alpha_s, beta_s } if alpha_s != beta_s => Ok(Count::new(5, 8)),
            _ => Ok(Count::new(1, 8)),
        })
        .unwrap();
        assert_eq!(
            s,
            Scales::Calibrated {
                alpha_s: 0.5,
                beta_s: 1.0
            }
        );
        let single = [Scales::Constant {
            alpha: 2.0,
            beta: 3.0,
        }];
        assert_eq!(
            select_scales(&single, |_| Ok(Count::new(0, 1))).unwrap().0,
            single[0]
        );
        assert!(select_scales(&[], |_| Ok(Count::default())).is_err());
    }

    struct Oracle {
        subject: SynthSubject,
        dicts: BTreeMap<i64, DirectionDictionary>,
        bundle: AlignmentBundle,
    }

    fn oracle(angle: f64, noise: f64, rank: usize) -> Oracle {
        let spec = PlantSpec {
            d: 64,
            values: (0..10).collect(),
            rank,
            contexts: vec![0, 1, 2],
            angle,
            noise,
            per_cell: 40,
            seed: 11,
            ..PlantSpec::default()
        };
        let (states, planted) = plant(&spec).unwrap();
        let dicts = dictionaries(&states, &spec.contexts, &spec.values, 32).unwrap();
        let bundle = align(&dicts, rank).unwrap();
        let subject = linear_readout_subject(&planted, Place::Ones).unwrap();
        Oracle {
            subject,
            dicts,
            bundle,
        }
    }

    fn synth_prompt(o: &Oracle, c: i64, v: i64, idx: u64) -> LabeledPrompt {
        LabeledPrompt {
            id: idx,
            tokens: o.subject.prompt(c, v, idx).unwrap(),
            gold: o.subject.answer_for(v),
            context: c,
            value: v,
        }
    }

    #[test]
    fn null_edit_reproduces_baseline() {
        let o = oracle(2.5, 0.0, 8);
        let src = DirectionSource {
            dicts: &o.dicts,
            bundle: &o.bundle,
            c_ref: 0,
        };
        let p = synth_prompt(&o, 1, 3, 0);
        let dirs = mode_directions(EditMode::Direct, src, 1, 3, 7, 0).unwrap();
        let spec = EditSpec {
            place: Place::Ones,
            layer: 0,
            mode: EditMode::Direct,
            scales: Scales::Constant {
                alpha: 0.0,
                beta: 0.0,
            },
        };
        let rec = apply_edit(&o.subject, &p, 7, &spec, &dirs).unwrap();
        assert_eq!(rec.decoded, Answer::Value(p.gold));
        assert!(!rec.strict);
        assert_eq!(rec.preserve, Some(true));
    }

    #[test]
    fn modes_coincide_in_the_reference_context() {
        // Full rank, so the rank-r projection is the identity on the dictionary span.
        let o = oracle(0.9, 0.0, 9);
        let src = DirectionSource {
            dicts: &o.dicts,
            bundle: &o.bundle,
            c_ref: 0,
        };
        let direct = mode_directions(EditMode::Direct, src, 0, 2, 6, 0).unwrap();
        for mode in [EditMode::Transfer, EditMode::Rotated] {
            let m = mode_directions(mode, src, 0, 2, 6, 0).unwrap();
            for (a, b) in direct
                .remove
                .iter()
                .zip(&m.remove)
                .chain(direct.add.iter().zip(&m.add))
            {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
            assert_eq!(direct.remove_norm, m.remove_norm);
        }
    }

    #[test]
    fn calibrated_edit_needs_norms() {
        let o = oracle(2.5, 0.0, 8);
        let p = synth_prompt(&o, 1, 3, 0);
        let dirs = EditDirections {
            remove: vec![0.0; 64],
            add: vec![0.0; 64],
            remove_norm: None,
            add_norm: None,
        };
        let spec = EditSpec {
            place: Place::Ones,
            layer: 0,
            mode: EditMode::Direct,
            scales: Scales::Calibrated {
                alpha_s: 1.0,
                beta_s: 1.0,
            },
        };
        assert!(apply_edit(&o.subject, &p, 4, &spec, &dirs).is_err());
    }

    fn mode_rates(o: &Oracle, noise_idx: u64) -> BTreeMap<EditMode, f64> {
        let prompts: Vec<LabeledPrompt> = (0..120u64)
            .map(|i| synth_prompt(o, 1, (i % 10) as i64, noise_idx + i))
            .collect();
        let (jobs, excluded) = edit_jobs(&prompts, Place::Ones, &o.bundle.values, None, 0).unwrap();
        assert_eq!(excluded, 0);
        assert!(jobs.len() >= 1000);
        let setup = LayerSetup {
            source: DirectionSource {
                dicts: &o.dicts,
                bundle: &o.bundle,
                c_ref: 0,
            },
            place: Place::Ones,
            layer: 0,
            seed: 5,
        };
        let scales = Scales::Calibrated {
            alpha_s: 1.0,
            beta_s: 1.0,
        };
        EditMode::all()
            .into_iter()
            .map(|m| {
                let recs = run_jobs(&o.subject, &prompts, &jobs, setup, m, scales).unwrap();
                let c: Count = recs.iter().map(|r| Count::new(r.strict as u64, 1)).sum();
                (m, c.rate().unwrap())
            })
            .collect()
    }

    #[test]
    fn planted_rotation_orders_the_modes() {
        let o = oracle(2.5, 0.01, 8);
        let rates = mode_rates(&o, 1000);
        assert_eq!(rates[&EditMode::Direct], 1.0, "{rates:?}");
        assert_eq!(rates[&EditMode::Rotated], 1.0, "{rates:?}");
        assert!(rates[&EditMode::Transfer] <= 0.2, "{rates:?}");
        assert!(rates[&EditMode::RandomR] <= 0.15, "{rates:?}");
        assert!(rates[&EditMode::WrongCondition] <= 0.15, "{rates:?}");
    }

    #[test]
    fn aggregation_pools_counts() {
        let rec = |mode, layer, strict, delta_abs| EvalRecord {
            instance_id: 0,
            context: 1,
            mode,
            layer,
            place: Place::Tens,
            value: 1,
            target_value: 2,
            target: 0,
            decoded: Answer::ParseFailure,
            parse_ok: strict,
            strict,
            preserve: strict.then_some(true),
            delta_abs,
        };
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(rec(EditMode::Direct, 3, i < 3, 1));
            records.push(rec(EditMode::Direct, 3, i < 7, 2));
        }
        let rows = aggregate(&records).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].summary.successes, rows[0].summary.n), (10, 20));
        assert_eq!(rows[0].summary.rate, 0.5);
        let strat = delta_stratified(&records, None).unwrap();
        assert_eq!(strat.len(), 2);
        assert_eq!(strat[0].delta_bucket, Some(1));
        assert_eq!(strat[0].summary.successes, 3);
        assert!(delta_stratified(&records, Some(&[4])).unwrap().is_empty());
        let diag = diagnostics(&records).unwrap();
        assert_eq!(diag[0].parse.successes, 10);
        assert_eq!(diag[0].preserve.unwrap().n, 10);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EditMode::all() {
            assert_eq!(m.to_string().parse::<EditMode>().unwrap(), m);
            assert_eq!(
                serde_json::to_value(m).unwrap(),
                serde_json::json!(m.to_string())
            );
        }
    }
}
