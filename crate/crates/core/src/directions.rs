// SPDX-License-Identifier: MIT OR Apache-2.0
//! Last-token state collection, diff-of-means directions and
//! context-conditioned one-vs-rest dictionaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::model::{InterventionPlan, SubjectModel};
use crate::numerics::Matrix;
use crate::task::{sample_where, AdditionInstance, Place, TemplateRegistry};

/// Default minimum rows per side of every DoM estimate.
pub const MIN_SAMPLES: usize = 32;

/// Below this norm a mean difference is treated as zero.
pub const DEGENERATE_DOM: f64 = 1e-9;

/// A focal attribute paired with the nuisance context it is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Ones-sum bucket `k ∈ 0..=18` under stripped-tens context `T`.
    OnesSum,
    /// Ones digit `y` of the sum under stripped-tens context `T`.
    OnesDigit,
    /// Tens digit `x` of the sum under hundreds context `H`.
    TensDigit,
}

impl Setting {
    /// `(context, value)` labels of an instance.
    pub fn label(self, inst: &AdditionInstance) -> (i64, i64) {
        match self {
            Setting::OnesSum => (inst.stripped_tens as i64, inst.k as i64),
            Setting::OnesDigit => (inst.stripped_tens as i64, inst.y as i64),
            Setting::TensDigit => (inst.hundreds_ctx as i64, inst.x as i64),
        }
    }

    pub fn values(self) -> Vec<i64> {
        match self {
            Setting::OnesSum => (0..=18).collect(),
            Setting::OnesDigit | Setting::TensDigit => (0..=9).collect(),
        }
    }

    /// Contexts that can occur for sums in `sum_range`.
    pub fn contexts(self, (lo, hi): (u32, u32)) -> Vec<i64> {
        match self {
            Setting::OnesSum | Setting::OnesDigit => (0..=9).collect(),
            Setting::TensDigit => ((lo / 100).min(9)..=(hi / 100).min(9))
                .map(i64::from)
                .collect(),
        }
    }

    /// Digit place an edit in this setting targets.
    pub fn place(self) -> Option<Place> {
        match self {
            Setting::OnesSum => None,
            Setting::OnesDigit => Some(Place::Ones),
            Setting::TensDigit => Some(Place::Tens),
        }
    }

    pub fn context_name(self) -> &'static str {
        match self {
            Setting::OnesSum | Setting::OnesDigit => "T",
            Setting::TensDigit => "H",
        }
    }

    /// Default alignment rank.
    pub fn default_rank(self) -> usize {
        if self.values().len() >= 19 {
            12
        } else {
            8
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::OnesSum => "ones-sum",
            Setting::OnesDigit => "ones-digit",
            Setting::TensDigit => "tens-digit",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ones-sum" => Ok(Setting::OnesSum),
            "ones-digit" => Ok(Setting::OnesDigit),
            "tens-digit" => Ok(Setting::TensDigit),
            _ => Err(Error::InvalidArgument(format!("unknown setting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLabel {
    pub context: i64,
    pub value: i64,
    pub instance_id: u64,
}

/// Row-major `n × dim` states captured at one layer, with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBatch {
    pub layer: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub labels: Vec<StateLabel>,
}

impl StateBatch {
    pub fn new(layer: usize, dim: usize) -> Self {
        Self {
            layer,
            dim,
            vectors: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, vector: &[f32], label: StateLabel) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "state of length {} for dim {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "state for instance {}",
                label.instance_id
            )));
        }
        self.vectors.extend_from_slice(vector);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows whose label satisfies `pred`.
    pub fn rows_where(&self, pred: impl Fn(&StateLabel) -> bool) -> Vec<&[f32]> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| pred(l))
            .map(|(i, _)| self.row(i))
            .collect()
    }

    pub fn contexts(&self) -> BTreeSet<i64> {
        self.labels.iter().map(|l| l.context).collect()
    }

    /// Concatenate batches captured at the same layer.
    pub fn extend(&mut self, other: &StateBatch) -> Result<()> {
        if other.layer != self.layer || other.dim != self.dim {
            return Err(Error::Shape(
                "cannot merge batches from different layers".into(),
            ));
        }
        self.vectors.extend_from_slice(&other.vectors);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Persist as a container; labels go into the sidecar.
    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({ "kind": "state-batch", "layer": self.layer, "labels": self.labels });
        container::write(path, self.len(), self.dim, &self.vectors, meta)
    }

    pub fn load(path: &Path) -> Result<StateBatch> {
        let c = container::read(path)?;
        let layer = c.meta["layer"]
            .as_u64()
            .ok_or_else(|| Error::Container("state batch sidecar lacks a layer".into()))?
            as usize;
        let labels: Vec<StateLabel> = serde_json::from_value(c.meta["labels"].clone())?;
        if labels.len() != c.n_rows {
            return Err(Error::Container(format!(
                "{} labels for {} rows",
                labels.len(),
                c.n_rows
            )));
        }
        Ok(StateBatch {
            layer,
            dim: c.dim,
            vectors: c.data,
            labels,
        })
    }
}

/// Capture last-position `resid_post` at each of `layers` for every
/// instance, one forward pass per instance. Returns one batch per layer.
pub fn collect_states_multi(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    instances: &[AdditionInstance],
    layers: &[usize],
    setting: Setting,
) -> Result<Vec<StateBatch>> {
    let meta = model.meta();
    if let Some(&l) = layers.iter().find(|&&l| l >= meta.n_layers) {
        return Err(Error::OutOfRange(format!(
            "layer {l} of a {}-layer model",
            meta.n_layers
        )));
    }
    let captured: Vec<Vec<Vec<f32>>> = instances
        .par_iter()
        .map(|inst| {
            let tokens = model.tokenize(&registry.render_text(inst)?)?;
            let last = tokens.len() - 1;
            let spec: Vec<(usize, usize)> = layers.iter().map(|&l| (l, last)).collect();
            let trace = model.forward(&tokens, &InterventionPlan::default(), &spec)?;
            spec.iter()
                .map(|&(l, p)| trace.capture(l, p).map(<[f32]>::to_vec))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<StateBatch> = layers
        .iter()
        .map(|&l| StateBatch::new(l, meta.d_model))
        .collect();
    for (inst, per_layer) in instances.iter().zip(&captured) {
        let (context, value) = setting.label(inst);
        let label = StateLabel {
            context,
            value,
            instance_id: inst.id,
        };
        for (batch, v) in out.iter_mut().zip(per_layer) {
            batch.push(v, label)?;
        }
    }
    Ok(out)
}

/// Last-position `resid_post` at one layer.
pub fn collect_states(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    instances: &[AdditionInstance],
    layer: usize,
    setting: Setting,
) -> Result<StateBatch> {
    Ok(collect_states_multi(model, registry, instances, &[layer], setting)?.remove(0))
}

/// Unit diff-of-means direction with the norm it had before normalizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dom {
    pub direction: Vec<f64>,
    pub raw_norm: f64,
}

fn mean_of(rows: &[&[f32]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; dim];
    for r in rows {
        for (a, &b) in m.iter_mut().zip(r.iter()) {
            *a += b as f64;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// `normalize(mean(pos) − mean(neg))`, each instance weighted equally.
pub fn dom(pos: &[&[f32]], neg: &[&[f32]], min_samples: usize) -> Result<Dom> {
    let need = min_samples.max(1);
    if pos.len() < need || neg.len() < need {
        return Err(Error::InsufficientSamples(format!(
            "{} positives and {} negatives, need {need} each",
            pos.len(),
            neg.len()
        )));
    }
    let dim = pos[0].len();
    if pos.iter().chain(neg).any(|r| r.len() != dim) {
        return Err(Error::Shape("rows of unequal length".into()));
    }
    let mp = mean_of(pos, dim);
    let mn = mean_of(neg, dim);
    let diff: Vec<f64> = mp.iter().zip(&mn).map(|(a, b)| a - b).collect();
    let raw_norm = crate::numerics::norm(&diff);
    if !(raw_norm >= DEGENERATE_DOM) {
        return Err(Error::Degenerate(format!(
            "mean difference has norm {raw_norm:e}"
        )));
    }
    Ok(Dom {
        direction: diff.iter().map(|v| v / raw_norm).collect(),
        raw_norm,
    })
}

/// Unit value directions within one context at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionDictionary {
    pub layer: usize,
    pub context: i64,
    pub values: Vec<i64>,
    /// `|V| × d`, one unit row per value.
    pub rows: Matrix,
    /// Norm of each mean difference before normalization.
    pub raw_norms: Vec<f64>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl DirectionDictionary {
    pub fn index_of(&self, value: i64) -> Result<usize> {
        self.values
            .iter()
            .position(|&v| v == value)
            .ok_or(Error::MissingBucket {
                context: self.context,
                value,
            })
    }

    /// Unit direction and raw norm for `value`.
    pub fn direction(&self, value: i64) -> Result<(&[f64], f64)> {
        let i = self.index_of(value)?;
        Ok((self.rows.row(i), self.raw_norms[i]))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let data: Vec<f32> = self.rows.as_slice().iter().map(|&v| v as f32).collect();
        container::write(
            path,
            self.rows.rows(),
            self.rows.cols(),
            &data,
            self.sidecar_meta(),
        )
    }

    fn sidecar_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "direction-dictionary",
            "layer": self.layer,
            "context": self.context,
            "values": self.values,
            "raw_norms": self.raw_norms,
            "positives": self.positives,
            "negatives": self.negatives,
        })
    }

    /// Load a saved dictionary. Rows come back at f32 precision and are
    /// renormalized in 64-bit.
    pub fn load(path: &Path) -> Result<DirectionDictionary> {
        let c = container::read(path)?;
        let field = |k: &str| -> Result<serde_json::Value> {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Container(format!("dictionary sidecar lacks {k}")))
        };
        let rows = Matrix::from_vec(c.n_rows, c.dim, c.data.iter().map(|&v| v as f64).collect())?;
        Ok(DirectionDictionary {
            layer: serde_json::from_value(field("layer")?)?,
            context: serde_json::from_value(field("context")?)?,
            values: serde_json::from_value(field("values")?)?,
            rows: crate::numerics::row_normalize(&rows)?,
            raw_norms: serde_json::from_value(field("raw_norms")?)?,
            positives: serde_json::from_value(field("positives")?)?,
            negatives: serde_json::from_value(field("negatives")?)?,
        })
    }
}

/// One-vs-rest dictionary inside `context`: row `v` is the DoM of states
/// labeled `(context, v)` against states labeled `(context, v' ≠ v)`.
pub fn conditional_dictionary(
    states: &StateBatch,
    context: i64,
    values: &[i64],
    min_samples: usize,
) -> Result<DirectionDictionary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty value set".into()));
    }
    let mut by_value: BTreeMap<i64, Vec<&[f32]>> = BTreeMap::new();
    for (i, l) in states.labels.iter().enumerate() {
        if l.context == context {
            by_value.entry(l.value).or_default().push(states.row(i));
        }
    }
    if let Some(&v) = values.iter().find(|v| !by_value.contains_key(v)) {
        return Err(Error::MissingBucket { context, value: v });
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut raw_norms = Vec::with_capacity(values.len());
    let mut positives = Vec::with_capacity(values.len());
    let mut negatives = Vec::with_capacity(values.len());
    for &v in values {
        let pos = by_value[&v].as_slice();
        let neg: Vec<&[f32]> = by_value
            .iter()
            .filter(|(&w, _)| w != v)
            .flat_map(|(_, rs)| rs.iter().copied())
            .collect();
        let d = dom(pos, &neg, min_samples).map_err(|e| match e {
            Error::InsufficientSamples(m) => {
                Error::InsufficientSamples(format!("context {context}, value {v}: {m}"))
            }
            Error::Degenerate(m) => Error::Degenerate(format!("context {context}, value {v}: {m}")),
            other => other,
        })?;
        positives.push(pos.len());
        negatives.push(neg.len());
        raw_norms.push(d.raw_norm);
        rows.push(d.direction);
    }
    Ok(DirectionDictionary {
        layer: states.layer,
        context,
        values: values.to_vec(),
        rows: Matrix::from_rows(&rows)?,
        raw_norms,
        positives,
        negatives,
    })
}

/// Dictionaries for every context, keyed by context.
pub fn dictionaries(
    states: &StateBatch,
    contexts: &[i64],
    values: &[i64],
    min_samples: usize,
) -> Result<BTreeMap<i64, DirectionDictionary>> {
    contexts
        .iter()
        .map(|&c| Ok((c, conditional_dictionary(states, c, values, min_samples)?)))
        .collect()
}

/// Top up `instances` until every `(context, value)` cell holds at least
/// `per_cell` members, drawing extra instances conditioned on the deficient
/// cell. Cells with no support in `sum_range` are reported as missing.
pub fn ensure_support(
    instances: &mut Vec<AdditionInstance>,
    setting: Setting,
    contexts: &[i64],
    per_cell: usize,
    seed: u64,
    sum_range: (u32, u32),
) -> Result<()> {
    let mut counts: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for inst in instances.iter() {
        *counts.entry(setting.label(inst)).or_default() += 1;
    }
    let template = instances.first().map(|i| i.template_id.clone());
    let mut next_id = instances.iter().map(|i| i.id + 1).max().unwrap_or(0);
    for &c in contexts {
        for v in setting.values() {
            let have = counts.get(&(c, v)).copied().unwrap_or(0);
            if have >= per_cell {
                continue;
            }
            let cell_seed = crate::rng::derive_seed(seed, "support", ((c as u64) << 32) ^ v as u64);
            let extra = sample_where(per_cell - have, cell_seed, sum_range, |i| {
                setting.label(i) == (c, v)
            })
            .map_err(|_| Error::MissingBucket {
                context: c,
                value: v,
            })?;
            for mut inst in extra {
                inst.id = next_id;
                next_id += 1;
                if let Some(t) = &template {
                    inst.template_id = t.clone();
                }
                instances.push(inst);
            }
        }
    }
    Ok(())
}

/// On-disk cache of collected states, rooted at `RESIDFORGE_CACHE`.
#[derive(Debug, Clone)]
pub struct StateCache {
    root: PathBuf,
}

/// Environment variable naming the cache root.
pub const CACHE_ENV: &str = "RESIDFORGE_CACHE";

impl StateCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// The cache named by `RESIDFORGE_CACHE`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(Self::new)
    }

    /// Path for a `(model, template, layer, seed)` entry. `extra` separates
    /// different instance sets collected under the same key.
    pub fn path(
        &self,
        model_identity: &str,
        template: &str,
        layer: usize,
        seed: u64,
        extra: &str,
    ) -> PathBuf {
        let key = format!("{model_identity}|{template}|{layer}|{seed}|{extra}");
        let h = container::sha256_hex(key.as_bytes());
        self.root.join(format!("states-L{layer}-{}.rsaf", &h[..16]))
    }

    /// Load cached batches for `layers`, collecting and storing any missing ones.
    #[allow(clippy::too_many_arguments)]
    pub fn get_or_collect(
        &self,
        model: &dyn SubjectModel,
        registry: &TemplateRegistry,
        instances: &[AdditionInstance],
        layers: &[usize],
        setting: Setting,
        template: &str,
        seed: u64,
    ) -> Result<Vec<StateBatch>> {
        let identity = model.meta().identity;
        let ids: Vec<u64> = instances.iter().map(|i| i.id).collect();
        let fingerprint = container::sha256_hex(
            serde_json::to_string(&(
                setting,
                &ids,
                instances.iter().map(|i| (i.a, i.b)).collect::<Vec<_>>(),
            ))?
            .as_bytes(),
        );
        let paths: Vec<PathBuf> = layers
            .iter()
            .map(|&l| self.path(&identity, template, l, seed, &fingerprint))
            .collect();
        let missing: Vec<usize> = layers
            .iter()
            .zip(&paths)
            .filter(|(_, p)| StateBatch::load(p).is_err())
            .map(|(&l, _)| l)
            .collect();
        if !missing.is_empty() {
            std::fs::create_dir_all(&self.root)?;
            let fresh = collect_states_multi(model, registry, instances, &missing, setting)?;
            for b in &fresh {
                b.save(&self.path(&identity, template, b.layer, seed, &fingerprint))?;
            }
        }
        paths.iter().map(|p| StateBatch::load(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, dot};

    fn rows(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn dom_of_constant_clouds() {
        let pos = vec![vec![2.0f32, 0.0, 0.0]; 32];
        let neg = vec![vec![0.0f32; 3]; 32];
        let d = dom(&rows(&pos), &rows(&neg), 32).unwrap();
        assert_eq!(d.direction, vec![1.0, 0.0, 0.0]);
        assert!((d.raw_norm - 2.0).abs() < 1e-12);
        let swapped = dom(&rows(&neg), &rows(&pos), 32).unwrap();
        assert_eq!(swapped.direction, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn dom_rejects_small_or_degenerate_input() {
        let a = vec![vec![1.0f32, 0.0]; 31];
        let b = vec![vec![0.0f32, 0.0]; 40];
        assert!(matches!(
            dom(&rows(&a), &rows(&b), 32),
            Err(Error::InsufficientSamples(_))
        ));
        let same = vec![vec![1.0f32, 1.0]; 40];
        assert!(matches!(
            dom(&rows(&same), &rows(&same), 32),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn two_value_dictionary_rows_are_negations() {
        let mut s = StateBatch::new(3, 2);
        for i in 0..40 {
            s.push(
                &[1.0, 0.5],
                StateLabel {
                    context: 1,
                    value: 0,
                    instance_id: i,
                },
            )
            .unwrap();
            s.push(
                &[-1.0, 0.5],
                StateLabel {
                    context: 1,
                    value: 1,
                    instance_id: 100 + i,
                },
            )
            .unwrap();
            // Another context that must not leak into the negatives.
            s.push(
                &[9.0, 9.0],
                StateLabel {
                    context: 2,
                    value: 1,
                    instance_id: 200 + i,
                },
            )
            .unwrap();
        }
        let d = conditional_dictionary(&s, 1, &[0, 1], 32).unwrap();
        assert_eq!(d.rows.row(0), &[1.0, 0.0]);
        assert_eq!(d.rows.row(1), &[-1.0, 0.0]);
        assert_eq!(d.negatives, vec![40, 40]);
        assert_eq!(d.layer, 3);
    }

    #[test]
    fn missing_bucket_names_the_value() {
        let mut s = StateBatch::new(0, 1);
        for i in 0..40 {
            s.push(
                &[1.0],
                StateLabel {
                    context: 0,
                    value: 0,
                    instance_id: i,
                },
            )
            .unwrap();
        }
        match conditional_dictionary(&s, 0, &[0, 7], 32) {
            Err(Error::MissingBucket {
                context: 0,
                value: 7,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scale_equivariance() {
        let mut s = StateBatch::new(0, 4);
        let mut t = StateBatch::new(0, 4);
        let mut rng = crate::rng::seeded(5);
        for i in 0..200u64 {
            let v: Vec<f32> = (0..4)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let label = StateLabel {
                context: 0,
                value: (i % 3) as i64,
                instance_id: i,
            };
            s.push(&v, label).unwrap();
            t.push(&v.iter().map(|x| x * 4.0).collect::<Vec<_>>(), label)
                .unwrap();
        }
        let a = conditional_dictionary(&s, 0, &[0, 1, 2], 32).unwrap();
        let b = conditional_dictionary(&t, 0, &[0, 1, 2], 32).unwrap();
        assert!(a.rows.sub(&b.rows).unwrap().max_abs() < 1e-6);
        for (x, y) in a.raw_norms.iter().zip(&b.raw_norms) {
            assert!((y / x - 4.0).abs() < 1e-5);
        }
        for r in 0..3 {
            assert!((dot(a.rows.row(r), a.rows.row(r)) - 1.0).abs() < 1e-12);
            assert!(cosine(a.rows.row(r), b.rows.row(r)) > 1.0 - 1e-9);
        }
    }

    #[test]
    fn batch_and_dictionary_round_trip_through_containers() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = StateBatch::new(2, 3);
        for i in 0..70u64 {
            let v = [i as f32, (i % 2) as f32, 1.0];
            s.push(
                &v,
                StateLabel {
                    context: 4,
                    value: (i % 2) as i64,
                    instance_id: i,
                },
            )
            .unwrap();
        }
        let p = dir.path().join("s.rsaf");
        s.save(&p).unwrap();
        assert_eq!(StateBatch::load(&p).unwrap(), s);

        let d = conditional_dictionary(&s, 4, &[0, 1], 32).unwrap();
        let q = dir.path().join("d.rsaf");
        d.save(&q).unwrap();
        let back = DirectionDictionary::load(&q).unwrap();
        assert_eq!((back.layer, back.context, &back.values), (2, 4, &d.values));
        assert!(back.rows.sub(&d.rows).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn support_top_up_fills_every_cell() {
        let mut inst = crate::task::sample_instances(50, 1, (200, 999)).unwrap();
        let contexts = Setting::TensDigit.contexts((200, 999));
        assert_eq!(contexts, (2..=9).collect::<Vec<_>>());
        ensure_support(&mut inst, Setting::TensDigit, &contexts, 3, 9, (200, 999)).unwrap();
        let mut counts: BTreeMap<(i64, i64), usize> = BTreeMap::new();
        for i in &inst {
            *counts.entry(Setting::TensDigit.label(i)).or_default() += 1;
        }
        for &c in &contexts {
            for v in 0..10 {
                assert!(counts[&(c, v)] >= 3);
            }
        }
        let ids: BTreeSet<u64> = inst.iter().map(|i| i.id).collect();
        assert_eq!(ids.len(), inst.len());
        let mut bad = Vec::new();
        assert!(matches!(
            ensure_support(&mut bad, Setting::TensDigit, &[1], 1, 0, (200, 999)),
            Err(Error::MissingBucket { context: 1, .. })
        ));
    }
}
