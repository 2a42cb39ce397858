// SPDX-License-Identifier: MIT OR Apache-2.0
//! Planted-structure oracle.
//!
//! A state for context `c` and value `v` is
//! `base_c + γ·B*·(z_vᵀ·Q_c)ᵀ + noise`, where `B*` is a shared `d × r` core,
//! `z_v` a unit code and `Q_c` an orthogonal per-context orientation
//! (`Q_ref = I`). The true rotator from context `a` to `b` is `Q_aᵀ·Q_b`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::directions::{StateBatch, StateLabel};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, InterventionPlan, ModelMeta, SubjectModel};
use crate::numerics::{dot, random_orthogonal, row_normalize, Matrix};
use crate::rng::{derive_seed, stream};
use crate::task::{Answer, Place};

/// Parameters of a planted population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub d: usize,
    pub values: Vec<i64>,
    pub rank: usize,
    pub contexts: Vec<i64>,
    /// Context whose orientation is the identity.
    pub ref_context: i64,
    /// Rotation angle per 2-plane between consecutive contexts, in radians.
    pub angle: f64,
    pub gain: f64,
    pub noise: f64,
    pub per_cell: usize,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            d: 128,
            values: (0..19).collect(),
            rank: 12,
            contexts: vec![0, 1, 2],
            ref_context: 0,
            angle: std::f64::consts::FRAC_PI_6,
            gain: 1.0,
            noise: 0.0,
            per_cell: 64,
            seed: 0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let nv = self.values.len();
        if nv < 2 || self.contexts.is_empty() {
            return Err(Error::InvalidArgument(
                "need at least two values and one context".into(),
            ));
        }
        // Centering the codes costs one dimension, so a rank-r dictionary
        // needs at least r + 1 values.
        if self.rank == 0 || self.rank + 1 > nv || self.rank + 1 > self.d {
            return Err(Error::InvalidArgument(format!(
                "rank {} needs 1 <= r < min(|V|, d) = {}",
                self.rank,
                nv.min(self.d)
            )));
        }
        if !self.contexts.contains(&self.ref_context) {
            return Err(Error::InvalidArgument(format!(
                "reference context {} not planted",
                self.ref_context
            )));
        }
        if !(self.gain > 0.0) || !(self.noise >= 0.0) || !self.angle.is_finite() {
            return Err(Error::InvalidArgument(
                "gain must be positive and noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A planted population with its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Planted {
    pub spec: PlantSpec,
    /// Shared core, `d × r`, orthonormal columns.
    pub core: Matrix,
    /// Unit value codes, `|V| × r`.
    pub codes: Matrix,
    /// Orientation `Q_c` per context.
    pub orientations: BTreeMap<i64, Matrix>,
    /// Context offsets, orthogonal to the core.
    pub offsets: BTreeMap<i64, Vec<f64>>,
}

/// Rotation by `theta` in every coordinate plane `(2i, 2i+1)` of the
/// `p`-conjugated frame.
fn plane_rotation(p: &Matrix, theta: f64) -> Matrix {
    let r = p.rows();
    let mut g = Matrix::identity(r);
    let (s, c) = theta.sin_cos();
    for i in 0..r / 2 {
        let (a, b) = (2 * i, 2 * i + 1);
        g[(a, a)] = c;
        g[(a, b)] = -s;
        g[(b, a)] = s;
        g[(b, b)] = c;
    }
    p.matmul(&g)
        .and_then(|m| m.matmul(&p.transpose()))
        .expect("square factors")
}

/// Build the core, codes, orientations and offsets of `spec`.
pub fn plant_truth(spec: &PlantSpec) -> Result<Planted> {
    spec.validate()?;
    let (d, r, nv) = (spec.d, spec.rank, spec.values.len());
    let core = random_orthogonal(d, derive_seed(spec.seed, "core", 0)).leading_cols(r);
    let codes =
        row_normalize(&random_orthogonal(nv, derive_seed(spec.seed, "codes", 0)).leading_cols(r))?;
    let frame = random_orthogonal(r, derive_seed(spec.seed, "frame", 0));
    let ref_pos = spec
        .contexts
        .iter()
        .position(|&c| c == spec.ref_context)
        .expect("validated") as f64;
    let orientations = spec
        .contexts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, plane_rotation(&frame, spec.angle * (i as f64 - ref_pos))))
        .collect();
    let mut offsets = BTreeMap::new();
    for (i, &c) in spec.contexts.iter().enumerate() {
        let mut rng = stream(spec.seed, "offset", i as u64);
        let mut v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let coords = core.t_mul_vec(&v)?;
        let inside = core.mul_vec(&coords)?;
        v.iter_mut().zip(&inside).for_each(|(a, b)| *a -= b);
        offsets.insert(c, v);
    }
    Ok(Planted {
        spec: spec.clone(),
        core,
        codes,
        orientations,
        offsets,
    })
}

impl Planted {
    fn value_index(&self, v: i64) -> Result<usize> {
        self.spec
            .values
            .iter()
            .position(|&w| w == v)
            .ok_or(Error::MissingBucket {
                context: i64::MIN,
                value: v,
            })
    }

    fn orientation(&self, c: i64) -> Result<&Matrix> {
        self.orientations
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("context {c} not planted")))
    }

    /// Core coordinates `z_vᵀ·Q_c` of value `v` in context `c`.
    pub fn coords(&self, c: i64, v: i64) -> Result<Vec<f64>> {
        let z = self.codes.row(self.value_index(v)?);
        self.orientation(c)?.t_mul_vec(z)
    }

    /// Unit planted direction `B*·(z_vᵀ·Q_c)ᵀ`.
    pub fn direction(&self, c: i64, v: i64) -> Result<Vec<f64>> {
        self.core.mul_vec(&self.coords(c, v)?)
    }

    /// True rotator `Q_aᵀ·Q_b` taking context-`a` coordinates to context `b`.
    pub fn rotator(&self, a: i64, b: i64) -> Result<Matrix> {
        self.orientation(a)?.t_matmul(self.orientation(b)?)
    }

    /// Expected one-vs-rest DoM direction (unit) for `(c, v)`.
    pub fn true_dom(&self, c: i64, v: i64) -> Result<Vec<f64>> {
        let pos = self.direction(c, v)?;
        let mut neg = vec![0.0; self.spec.d];
        let others: Vec<i64> = self
            .spec
            .values
            .iter()
            .copied()
            .filter(|&w| w != v)
            .collect();
        for &w in &others {
            for (a, b) in neg.iter_mut().zip(self.direction(c, w)?) {
                *a += b / others.len() as f64;
            }
        }
        let diff: Vec<f64> = pos.iter().zip(&neg).map(|(a, b)| a - b).collect();
        let n = crate::numerics::norm(&diff);
        Ok(diff.iter().map(|x| x / n).collect())
    }

    /// Noise-free state for `(c, v)`.
    pub fn clean_state(&self, c: i64, v: i64) -> Result<Vec<f64>> {
        let g = self.direction(c, v)?;
        let base = self
            .offsets
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("context {c} not planted")))?;
        Ok(base
            .iter()
            .zip(&g)
            .map(|(b, x)| b + self.spec.gain * x)
            .collect())
    }

    /// State of sample `idx` in cell `(c, v)`, noise seeded per sample.
    pub fn sample_state(&self, c: i64, v: i64, idx: u64) -> Result<Vec<f32>> {
        let mut s = self.clean_state(c, v)?;
        if self.spec.noise > 0.0 {
            let key = derive_seed(
                self.spec.seed,
                "cell",
                ((c as u64) << 40) ^ ((v as u64) << 20),
            );
            let mut rng = stream(key, "noise", idx);
            let normal = Normal::new(0.0, self.spec.noise).expect("valid sigma");
            s.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        Ok(s.iter().map(|&x| x as f32).collect())
    }

    /// All planted states: `per_cell` samples for every `(c, v)`.
    pub fn states(&self) -> Result<StateBatch> {
        let mut batch = StateBatch::new(0, self.spec.d);
        let mut id = 0u64;
        for &c in &self.spec.contexts {
            for &v in &self.spec.values {
                for i in 0..self.spec.per_cell {
                    batch.push(
                        &self.sample_state(c, v, i as u64)?,
                        StateLabel {
                            context: c,
                            value: v,
                            instance_id: id,
                        },
                    )?;
                    id += 1;
                }
            }
        }
        Ok(batch)
    }

    /// Ground truth as JSON.
    pub fn ground_truth_json(&self) -> Result<serde_json::Value> {
        let rotators: Vec<serde_json::Value> = self
            .spec
            .contexts
            .iter()
            .flat_map(|&a| self.spec.contexts.iter().map(move |&b| (a, b)))
            .map(|(a, b)| {
                Ok(serde_json::json!({ "from": a, "to": b, "rotator": self.rotator(a, b)? }))
            })
            .collect::<Result<_>>()?;
        Ok(serde_json::json!({
            "spec": self.spec,
            "core": self.core,
            "codes": self.codes,
            "rotators": rotators,
        }))
    }
}

/// Plant a population and return its states and ground truth.
pub fn plant(spec: &PlantSpec) -> Result<(StateBatch, Planted)> {
    let truth = plant_truth(spec)?;
    Ok((truth.states()?, truth))
}

/// A one-layer subject whose answer is the planted value with the largest
/// score `⟨state, direction(c, v)⟩`, written into a carrier integer at the
/// configured digit place.
///
/// Prompts are three tokens `[context, value, sample]`; the text form is the
/// same three integers separated by spaces. Only the last position carries
/// the planted state; earlier positions are zero.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    planted: Planted,
    place: Place,
    carrier: u32,
    directions: BTreeMap<i64, Matrix>,
    identity: String,
}

/// Default carrier: digit places other than the edited one read 5.
pub const DEFAULT_CARRIER: u32 = 555;

/// Linear-readout subject for `planted`. Needs `|V| ≤ 10` and values that
/// are decimal digits.
pub fn linear_readout_subject(planted: &Planted, place: Place) -> Result<SynthSubject> {
    if planted.spec.values.iter().any(|&v| !(0..=9).contains(&v)) {
        return Err(Error::InvalidArgument(
            "linear-readout values must be digits 0..=9".into(),
        ));
    }
    let carrier = DEFAULT_CARRIER - place.digit_of(DEFAULT_CARRIER) * place.weight() as u32;
    let directions = planted
        .spec
        .contexts
        .iter()
        .map(|&c| {
            let rows: Vec<Vec<f64>> = planted
                .spec
                .values
                .iter()
                .map(|&v| planted.direction(c, v))
                .collect::<Result<_>>()?;
            Ok((c, Matrix::from_rows(&rows)?))
        })
        .collect::<Result<_>>()?;
    let identity = crate::container::sha256_hex(serde_json::to_string(&planted.spec)?.as_bytes());
    Ok(SynthSubject {
        planted: planted.clone(),
        place,
        carrier,
        directions,
        identity,
    })
}

impl SynthSubject {
    pub fn planted(&self) -> &Planted {
        &self.planted
    }

    pub fn place(&self) -> Place {
        self.place
    }

    /// Gold answer for value `v`.
    pub fn answer_for(&self, v: i64) -> u32 {
        self.carrier + v as u32 * self.place.weight() as u32
    }

    /// Prompt tokens for sample `idx` of cell `(c, v)`.
    pub fn prompt(&self, c: i64, v: i64, idx: u64) -> Result<Vec<u32>> {
        let ci = u32::try_from(c)
            .map_err(|_| Error::InvalidArgument(format!("context {c} is negative")))?;
        Ok(vec![ci, v as u32, idx as u32])
    }

    /// Index of the best-scoring value for `state` in context `c`.
    pub fn decode(&self, c: i64, state: &[f64]) -> Result<i64> {
        let dirs = self
            .directions
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("context {c} not planted")))?;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..dirs.rows() {
            let s = dot(dirs.row(i), state);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        Ok(self.planted.spec.values[best])
    }
}

impl SubjectModel for SynthSubject {
    fn meta(&self) -> ModelMeta {
        ModelMeta {
            n_layers: 1,
            d_model: self.planted.spec.d,
            identity: self.identity.clone(),
        }
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let toks: Vec<u32> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>().map_err(|_| {
                    Error::Tokenizer(format!("synthetic prompts are integers, got {t:?}"))
                })
            })
            .collect::<Result<_>>()?;
        if toks.len() != 3 {
            return Err(Error::Tokenizer(format!(
                "synthetic prompts have 3 tokens, got {}",
                toks.len()
            )));
        }
        Ok(toks)
    }

    fn forward(
        &self,
        tokens: &[u32],
        plan: &InterventionPlan,
        captures: &[(usize, usize)],
    ) -> Result<ForwardTrace> {
        if tokens.len() != 3 {
            return Err(Error::Tokenizer(format!(
                "synthetic prompts have 3 tokens, got {}",
                tokens.len()
            )));
        }
        let d = self.planted.spec.d;
        plan.validate(1, d, 3)?;
        let (c, v, idx) = (tokens[0] as i64, tokens[1] as i64, tokens[2] as u64);
        let mut states = vec![vec![0.0f32; d]; 3];
        states[2] = self.planted.sample_state(c, v, idx)?;
        if plan.attn_zero.contains(&0) {
            // Without attention the last position never sees the context.
            states[2] = vec![0.0; d];
        }
        let (overwrites, deltas) = plan.writes_at(0);
        for w in overwrites {
            states[w.position].copy_from_slice(&w.vector);
        }
        for w in deltas {
            states[w.position]
                .iter_mut()
                .zip(&w.vector)
                .for_each(|(a, b)| *a += b);
        }
        let mut out = BTreeMap::new();
        for &(l, p) in captures {
            if l != 0 || p >= 3 {
                return Err(Error::OutOfRange(format!(
                    "capture ({l}, {p}) in a 1-layer, 3-token subject"
                )));
            }
            out.insert((l, p), states[p].clone());
        }
        let last: Vec<f64> = states[2].iter().map(|&x| x as f64).collect();
        let value = self.decode(c, &last)?;
        let answer = self.answer_for(value);
        Ok(ForwardTrace {
            captures: out,
            decoded_token: answer,
            answer: Answer::Value(answer),
            logits_last: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{align, dictionary_metrics, fit_basis};
    use crate::directions::{conditional_dictionary, dictionaries};
    use crate::numerics::cosine;

    fn spec(angle: f64, noise: f64) -> PlantSpec {
        PlantSpec {
            d: 32,
            values: (0..6).collect(),
            rank: 4,
            angle,
            noise,
            per_cell: 40,
            ..PlantSpec::default()
        }
    }

    #[test]
    fn truth_is_orthonormal_and_composes() {
        let t = plant_truth(&PlantSpec {
            contexts: vec![0, 1, 2, 3],
            ..spec(0.7, 0.0)
        })
        .unwrap();
        assert!(t.core.orthonormality_error() < 1e-9);
        for q in t.orientations.values() {
            assert!(q.orthonormality_error() < 1e-9);
        }
        let ab = t.rotator(0, 1).unwrap();
        let bc = t.rotator(1, 3).unwrap();
        let ac = t.rotator(0, 3).unwrap();
        assert!(ab.matmul(&bc).unwrap().sub(&ac).unwrap().max_abs() < 1e-9);
        assert!(
            t.rotator(0, 0)
                .unwrap()
                .sub(&Matrix::identity(4))
                .unwrap()
                .max_abs()
                < 1e-12
        );
        for (c, off) in &t.offsets {
            let inside = t.core.t_mul_vec(off).unwrap();
            assert!(
                crate::numerics::norm(&inside) < 1e-9,
                "offset {c} leaks into the core"
            );
        }
    }

    #[test]
    fn zero_noise_single_context_dictionary_is_exact() {
        let s = PlantSpec {
            contexts: vec![0],
            ..spec(0.0, 0.0)
        };
        let (states, truth) = plant(&s).unwrap();
        let d = conditional_dictionary(&states, 0, &s.values, 32).unwrap();
        for (i, &v) in s.values.iter().enumerate() {
            assert!(cosine(d.rows.row(i), &truth.true_dom(0, v).unwrap()) >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn noisy_dictionary_recovers_planted_rows() {
        let s = PlantSpec {
            noise: 0.1,
            per_cell: 100,
            ..spec(0.0, 0.1)
        };
        let (states, truth) = plant(&s).unwrap();
        let d = conditional_dictionary(&states, 1, &s.values, 32).unwrap();
        for (i, &v) in s.values.iter().enumerate() {
            assert!(cosine(d.rows.row(i), &truth.true_dom(1, v).unwrap()) >= 0.99);
        }
    }

    #[test]
    fn planted_rank_is_exact_at_zero_noise() {
        let s = spec(0.3, 0.0);
        let (states, _) = plant(&s).unwrap();
        let d = conditional_dictionary(&states, 2, &s.values, 32).unwrap();
        let b = fit_basis(&d.rows, 4).unwrap();
        let resid = d
            .rows
            .sub(&d.rows.matmul(&b).unwrap().matmul(&b.transpose()).unwrap())
            .unwrap();
        assert!(resid.frobenius_norm() / d.rows.frobenius_norm() <= 1e-6);
    }

    #[test]
    fn rotation_shows_in_unaligned_but_not_aligned_metrics() {
        let s = PlantSpec {
            d: 64,
            values: (0..19).collect(),
            rank: 12,
            per_cell: 32,
            ..spec(std::f64::consts::FRAC_PI_6, 0.0)
        };
        let (states, _) = plant(&s).unwrap();
        let dicts = dictionaries(&states, &[0, 1], &s.values, 32).unwrap();
        let m = dictionary_metrics(&dicts[&0].rows, &dicts[&1].rows, 12).unwrap();
        assert!(m.cos_unaligned < 0.95, "{m:?}");
        assert!(m.cos_proc >= 1.0 - 1e-6, "{m:?}");
        assert!(m.relfro <= 1e-6, "{m:?}");
    }

    #[test]
    fn fitted_rotators_compose_to_identity() {
        let s = spec(0.9, 0.0);
        let (states, _) = plant(&s).unwrap();
        let dicts = dictionaries(&states, &s.contexts, &s.values, 32).unwrap();
        let bundle = align(&dicts, 4).unwrap();
        let round = bundle
            .rotator(0, 2)
            .unwrap()
            .matmul(bundle.rotator(2, 0).unwrap())
            .unwrap();
        assert!(round.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn readout_decodes_the_planted_value() {
        let s = PlantSpec {
            values: (0..10).collect(),
            rank: 8,
            ..spec(2.0, 0.0)
        };
        let truth = plant_truth(&s).unwrap();
        let subj = linear_readout_subject(&truth, Place::Ones).unwrap();
        for &c in &s.contexts {
            for &v in &s.values {
                let toks = subj.prompt(c, v, 3).unwrap();
                let t = subj
                    .forward(&toks, &InterventionPlan::default(), &[(0, 2)])
                    .unwrap();
                assert_eq!(t.answer, Answer::Value(550 + v as u32));
                assert_eq!(t.capture(0, 2).unwrap().len(), 32);
            }
        }
        assert_eq!(subj.tokenize("1 4 7").unwrap(), vec![1, 4, 7]);
        assert!(subj.tokenize("1 4").is_err());
        let tens = linear_readout_subject(&truth, Place::Tens).unwrap();
        assert_eq!(tens.answer_for(3), 535);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(plant_truth(&PlantSpec {
            rank: 6,
            ..spec(0.0, 0.0)
        })
        .is_err());
        assert!(plant_truth(&PlantSpec {
            ref_context: 9,
            ..spec(0.0, 0.0)
        })
        .is_err());
        assert!(plant_truth(&PlantSpec {
            noise: -1.0,
            ..spec(0.0, 0.0)
        })
        .is_err());
        let wide = plant_truth(&PlantSpec {
            values: (0..12).collect(),
            ..spec(0.0, 0.0)
        })
        .unwrap();
        assert!(linear_readout_subject(&wide, Place::Ones).is_err());
    }
}
