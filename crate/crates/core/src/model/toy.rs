// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder-only transformer with `resid_post` hook points.
//!
//! Integer tokens carry a factorized digit code: the embedding of integer
//! `n` is its free token vector plus one learned vector per (place, digit),
//! and the unembedding mirrors that split. The same block routine serves the
//! hooked inference pass and the cached training pass, so both produce
//! bit-identical activations.

use std::ops::Range;

use rand::Rng;
use rand_distr::Normal;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::{ForwardTrace, InterventionPlan, ModelMeta, SubjectModel};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::task::{Tokenizer, MAX_INT_TOKEN};

pub(crate) const DIGIT_PLACES: usize = 4;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerLayout {
    pub ln1: Span,
    pub wq: Span,
    pub wk: Span,
    pub wv: Span,
    pub wo: Span,
    pub ln2: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Span,
    pub digit_emb: Span,
    pub pos_emb: Span,
    pub layers: Vec<LayerLayout>,
    pub lnf: Span,
    pub unembed: Span,
    pub digit_unembed: Span,
    pub total: usize,
    /// (name, span, shape) for manifests.
    pub named: Vec<(String, Span, Vec<usize>)>,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut named = Vec::new();
        let mut take = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            let span = Span { start: next, len };
            next += len;
            named.push((name, span, shape));
            span
        };
        let (d, v, ff) = (c.d_model, c.vocab_size, c.d_ff);
        let tok_emb = take("tok_emb".into(), vec![v, d]);
        let digit_emb = take("digit_emb".into(), vec![DIGIT_PLACES, 10, d]);
        let pos_emb = take("pos_emb".into(), vec![c.max_seq, d]);
        let layers = (0..c.n_layers)
            .map(|l| LayerLayout {
                ln1: take(format!("blocks.{l}.ln1"), vec![d]),
                wq: take(format!("blocks.{l}.wq"), vec![d, d]),
                wk: take(format!("blocks.{l}.wk"), vec![d, d]),
                wv: take(format!("blocks.{l}.wv"), vec![d, d]),
                wo: take(format!("blocks.{l}.wo"), vec![d, d]),
                ln2: take(format!("blocks.{l}.ln2"), vec![d]),
                w1: take(format!("blocks.{l}.w1"), vec![d, ff]),
                b1: take(format!("blocks.{l}.b1"), vec![ff]),
                w2: take(format!("blocks.{l}.w2"), vec![ff, d]),
                b2: take(format!("blocks.{l}.b2"), vec![d]),
            })
            .collect();
        let lnf = take("lnf".into(), vec![d]);
        let unembed = take("unembed".into(), vec![v, d]);
        let digit_unembed = take("digit_unembed".into(), vec![DIGIT_PLACES, 10, d]);
        Layout {
            tok_emb,
            digit_emb,
            pos_emb,
            layers,
            lnf,
            unembed,
            digit_unembed,
            total: next,
            named,
        }
    }
}

/// Initial amplitude of the periodic digit features.
pub(crate) const DIGIT_FEATURE_SCALE: f32 = 10.0;

/// Seeds each digit (and digit-unembedding) row with cos/sin of the digit at
/// frequencies 1..=5 over a period of 10, in ten coordinates per place.
/// Without this, modular structure of the ones digit is learned very slowly.
fn add_digit_features(layout: &Layout, d: usize, params: &mut [f32]) {
    for span in [layout.digit_emb, layout.digit_unembed] {
        for place in 0..DIGIT_PLACES {
            for digit in 0..10 {
                let row = span.start + (place * 10 + digit) * d;
                for k in 1..=5usize {
                    let theta = std::f32::consts::TAU * (k * digit) as f32 / 10.0;
                    let c = (place * 10 + 2 * (k - 1)) % d;
                    params[row + c] += DIGIT_FEATURE_SCALE * theta.cos();
                    params[row + (c + 1) % d] += DIGIT_FEATURE_SCALE * theta.sin();
                }
            }
        }
    }
}

/// Digits (thousands, hundreds, tens, ones) of an integer token.
pub(crate) fn int_digits(n: u32) -> [usize; DIGIT_PLACES] {
    [
        (n / 1000 % 10) as usize,
        (n / 100 % 10) as usize,
        (n / 10 % 10) as usize,
        (n % 10) as usize,
    ]
}

/// `out = x · w` with `x: rows×din`, `w: din×dout`, all row-major.
pub(crate) fn matmul(x: &[f32], rows: usize, w: &[f32], din: usize, dout: usize, out: &mut [f32]) {
    assert!(x.len() >= rows * din && w.len() >= din * dout && out.len() >= rows * dout);
    // SAFETY: the slice bounds above cover every strided access.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            din,
            dout,
            1.0,
            x.as_ptr(),
            din as isize,
            1,
            w.as_ptr(),
            dout as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            dout as isize,
            1,
        );
    }
}

/// `out = y · wᵀ` with `y: rows×dout`, `w: din×dout`; `out: rows×din`.
pub(crate) fn matmul_wt(
    y: &[f32],
    rows: usize,
    w: &[f32],
    din: usize,
    dout: usize,
    out: &mut [f32],
) {
    assert!(y.len() >= rows * dout && w.len() >= din * dout && out.len() >= rows * din);
    // SAFETY: the slice bounds above cover every strided access.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            dout,
            din,
            1.0,
            y.as_ptr(),
            dout as isize,
            1,
            w.as_ptr(),
            1,
            dout as isize,
            0.0,
            out.as_mut_ptr(),
            din as isize,
            1,
        );
    }
}

/// `dw += xᵀ · dy` with `x: rows×din`, `dy: rows×dout`.
pub(crate) fn acc_xt_dy(
    x: &[f32],
    dy: &[f32],
    rows: usize,
    din: usize,
    dout: usize,
    dw: &mut [f32],
) {
    assert!(x.len() >= rows * din && dy.len() >= rows * dout && dw.len() >= din * dout);
    // SAFETY: the slice bounds above cover every strided access.
    unsafe {
        matrixmultiply::sgemm(
            din,
            rows,
            dout,
            1.0,
            x.as_ptr(),
            1,
            din as isize,
            dy.as_ptr(),
            dout as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            dout as isize,
            1,
        );
    }
}

pub(crate) fn rmsnorm(x: &[f32], d: usize, g: &[f32], out: &mut [f32], inv: &mut [f32]) {
    for (r, (row, o)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        inv[r] = s;
        for ((oj, xj), gj) in o.iter_mut().zip(row).zip(g) {
            *oj = xj * s * gj;
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
fn fast_tanh(u: f32) -> f32 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Activations of one block kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f32>,
    pub n1: Vec<f32>,
    pub inv1: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// `[seq][head][i][j]`, `S×S` per head, zero above the diagonal.
    pub probs: Vec<f32>,
    pub att: Vec<f32>,
    pub x_mid: Vec<f32>,
    pub n2: Vec<f32>,
    pub inv2: Vec<f32>,
    pub hdn: Vec<f32>,
    pub act: Vec<f32>,
}

/// The built-in toy subject model.
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    pub(crate) config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f32>,
    tokenizer: Tokenizer,
}

impl ToyTransformer {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let tokenizer = Tokenizer::default();
        config.validate(&tokenizer)?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = stream(config.seed, "toy-init", 0);
        let base = 0.02f32;
        let resid = base / (2.0 * config.n_layers as f32).sqrt();
        let mut fill = |span: Span, std: f32, params: &mut Vec<f32>| {
            let dist = Normal::new(0.0f32, std).expect("valid std");
            for p in &mut params[span.range()] {
                *p = rng.sample(dist);
            }
        };
        fill(layout.tok_emb, base, &mut params);
        fill(layout.digit_emb, base, &mut params);
        fill(layout.pos_emb, base, &mut params);
        for l in &layout.layers {
            for s in [l.wq, l.wk, l.wv, l.w1] {
                fill(s, base, &mut params);
            }
            for s in [l.wo, l.w2] {
                fill(s, resid, &mut params);
            }
        }
        fill(layout.unembed, base, &mut params);
        fill(layout.digit_unembed, base, &mut params);
        for l in &layout.layers {
            params[l.ln1.range()].iter_mut().for_each(|g| *g = 1.0);
            params[l.ln2.range()].iter_mut().for_each(|g| *g = 1.0);
        }
        params[layout.lnf.range()].iter_mut().for_each(|g| *g = 1.0);
        add_digit_features(&layout, config.d_model, &mut params);
        Ok(Self {
            config,
            layout,
            params,
            tokenizer,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        let tokenizer = Tokenizer::default();
        config.validate(&tokenizer)?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            tokenizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 over the config and raw parameter bytes, hex.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn p(&self, s: Span) -> &[f32] {
        &self.params[s.range()]
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::OutOfRange(format!(
                "{} tokens exceed max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::OutOfRange(format!("token id {t}")));
        }
        Ok(())
    }

    /// Token + digit-code + position embeddings for a batch of equal-length
    /// sequences laid out back to back.
    pub(crate) fn embed(&self, tokens: &[u32], seq_len: usize) -> Vec<f32> {
        let d = self.config.d_model;
        let tok = self.p(self.layout.tok_emb);
        let dig = self.p(self.layout.digit_emb);
        let pos = self.p(self.layout.pos_emb);
        let mut x = vec![0.0f32; tokens.len() * d];
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(&tok[t as usize * d..(t as usize + 1) * d]);
            if t <= MAX_INT_TOKEN {
                for (place, digit) in int_digits(t).into_iter().enumerate() {
                    let off = (place * 10 + digit) * d;
                    for (r, e) in row.iter_mut().zip(&dig[off..off + d]) {
                        *r += e;
                    }
                }
            }
            let p = i % seq_len;
            for (r, e) in row.iter_mut().zip(&pos[p * d..(p + 1) * d]) {
                *r += e;
            }
        }
        x
    }

    /// One transformer block over `n_seq` sequences of `seq_len` tokens.
    pub(crate) fn block_forward(
        &self,
        layer: usize,
        x: &mut [f32],
        n_seq: usize,
        seq_len: usize,
        zero_attn: bool,
        cache: Option<&mut LayerCache>,
    ) {
        let c = &self.config;
        let (d, h, dh, ff) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff);
        let rows = n_seq * seq_len;
        let ll = &self.layout.layers[layer];

        let mut cache = cache;
        if let Some(cc) = cache.as_deref_mut() {
            cc.x_in = x.to_vec();
        }

        if !zero_attn {
            let mut n1 = vec![0.0f32; rows * d];
            let mut inv1 = vec![0.0f32; rows];
            rmsnorm(x, d, self.p(ll.ln1), &mut n1, &mut inv1);
            let mut q = vec![0.0f32; rows * d];
            let mut k = vec![0.0f32; rows * d];
            let mut v = vec![0.0f32; rows * d];
            matmul(&n1, rows, self.p(ll.wq), d, d, &mut q);
            matmul(&n1, rows, self.p(ll.wk), d, d, &mut k);
            matmul(&n1, rows, self.p(ll.wv), d, d, &mut v);
            let scale = 1.0 / (dh as f32).sqrt();
            let mut att = vec![0.0f32; rows * d];
            let mut probs = vec![0.0f32; n_seq * h * seq_len * seq_len];
            let mut scores = vec![0.0f32; seq_len];
            for s in 0..n_seq {
                for head in 0..h {
                    let pbase = (s * h + head) * seq_len * seq_len;
                    for i in 0..seq_len {
                        let qi = &q[(s * seq_len + i) * d + head * dh..][..dh];
                        let mut max = f32::NEG_INFINITY;
                        for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                            let kj = &k[(s * seq_len + j) * d + head * dh..][..dh];
                            *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                            max = max.max(*sc);
                        }
                        let mut z = 0.0f32;
                        for sc in scores.iter_mut().take(i + 1) {
                            *sc = (*sc - max).exp();
                            z += *sc;
                        }
                        let out = &mut att[(s * seq_len + i) * d + head * dh..][..dh];
                        for (j, sc) in scores.iter().enumerate().take(i + 1) {
                            let p = sc / z;
                            probs[pbase + i * seq_len + j] = p;
                            let vj = &v[(s * seq_len + j) * d + head * dh..][..dh];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
            let mut a = vec![0.0f32; rows * d];
            matmul(&att, rows, self.p(ll.wo), d, d, &mut a);
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += ai;
            }
            if let Some(cc) = cache.as_deref_mut() {
                cc.n1 = n1;
                cc.inv1 = inv1;
                cc.q = q;
                cc.k = k;
                cc.v = v;
                cc.probs = probs;
                cc.att = att;
            }
        }

        let mut n2 = vec![0.0f32; rows * d];
        let mut inv2 = vec![0.0f32; rows];
        rmsnorm(x, d, self.p(ll.ln2), &mut n2, &mut inv2);
        let mut hdn = vec![0.0f32; rows * ff];
        matmul(&n2, rows, self.p(ll.w1), d, ff, &mut hdn);
        let b1 = self.p(ll.b1);
        for row in hdn.chunks_exact_mut(ff) {
            for (hv, b) in row.iter_mut().zip(b1) {
                *hv += b;
            }
        }
        let act: Vec<f32> = hdn.iter().map(|&v| gelu(v)).collect();
        let mut m = vec![0.0f32; rows * d];
        matmul(&act, rows, self.p(ll.w2), ff, d, &mut m);
        let b2 = self.p(ll.b2);
        if let Some(cc) = cache.as_deref_mut() {
            cc.x_mid = x.to_vec();
        }
        for (xrow, mrow) in x.chunks_exact_mut(d).zip(m.chunks_exact(d)) {
            for ((xi, mi), bi) in xrow.iter_mut().zip(mrow).zip(b2) {
                *xi += mi + bi;
            }
        }
        if let Some(cc) = cache {
            cc.n2 = n2;
            cc.inv2 = inv2;
            cc.hdn = hdn;
            cc.act = act;
        }
    }

    /// Final norm and unembedding of one state. Returns (logits, normed, inv_rms).
    pub(crate) fn head(&self, state: &[f32]) -> (Vec<f32>, Vec<f32>, f32) {
        let d = self.config.d_model;
        let mut nf = vec![0.0f32; d];
        let mut inv = [0.0f32];
        rmsnorm(state, d, self.p(self.layout.lnf), &mut nf, &mut inv);
        let un = self.p(self.layout.unembed);
        let du = self.p(self.layout.digit_unembed);
        let dot = |w: &[f32]| nf.iter().zip(w).map(|(a, b)| a * b).sum::<f32>();
        let digit_scores: Vec<f32> = du.chunks_exact(d).map(dot).collect();
        let logits = un
            .chunks_exact(d)
            .enumerate()
            .map(|(t, w)| {
                let mut l = dot(w);
                if t as u32 <= MAX_INT_TOKEN {
                    for (place, digit) in int_digits(t as u32).into_iter().enumerate() {
                        l += digit_scores[place * 10 + digit];
                    }
                }
                l
            })
            .collect();
        (logits, nf, inv[0])
    }

    /// Plain forward pass with no hook machinery; returns final-position logits.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let s = tokens.len();
        let mut x = self.embed(tokens, s);
        for l in 0..self.config.n_layers {
            self.block_forward(l, &mut x, 1, s, false, None);
        }
        Ok(self.head(&x[(s - 1) * d..]).0)
    }
}

impl ToyTransformer {
    /// Final-position logits for many equal-length token sequences at once.
    pub fn logits_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        let Some(first) = seqs.first() else {
            return Ok(Vec::new());
        };
        let s = first.len();
        if seqs.iter().any(|t| t.len() != s) {
            return Err(Error::Shape(
                "batched sequences must share one length".into(),
            ));
        }
        for t in seqs {
            self.check_tokens(t)?;
        }
        let d = self.config.d_model;
        let tokens: Vec<u32> = seqs.iter().flat_map(|t| t.iter().copied()).collect();
        let mut x = self.embed(&tokens, s);
        for l in 0..self.config.n_layers {
            self.block_forward(l, &mut x, seqs.len(), s, false, None);
        }
        Ok((0..seqs.len())
            .map(|i| self.head(&x[(i * s + s - 1) * d..(i * s + s) * d]).0)
            .collect())
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub(crate) fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}

impl SubjectModel for ToyTransformer {
    fn meta(&self) -> ModelMeta {
        ModelMeta {
            n_layers: self.config.n_layers,
            d_model: self.config.d_model,
            identity: self.weights_hash(),
        }
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.encode(text)
    }

    fn forward(
        &self,
        tokens: &[u32],
        plan: &InterventionPlan,
        captures: &[(usize, usize)],
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let (n_layers, d) = (self.config.n_layers, self.config.d_model);
        let s = tokens.len();
        plan.validate(n_layers, d, s)?;
        for &(l, p) in captures {
            if l >= n_layers || p >= s {
                return Err(Error::OutOfRange(format!("capture at ({l}, {p})")));
            }
        }
        let mut x = self.embed(tokens, s);
        let mut trace_caps = std::collections::BTreeMap::new();
        for l in 0..n_layers {
            self.block_forward(l, &mut x, 1, s, plan.attn_zero.contains(&l), None);
            let (overwrites, deltas) = plan.writes_at(l);
            for w in overwrites {
                x[w.position * d..(w.position + 1) * d].copy_from_slice(&w.vector);
            }
            for w in deltas {
                for (xi, di) in x[w.position * d..(w.position + 1) * d]
                    .iter_mut()
                    .zip(&w.vector)
                {
                    *xi += di;
                }
            }
            for &(cl, cp) in captures.iter().filter(|(cl, _)| *cl == l) {
                trace_caps.insert((cl, cp), x[cp * d..(cp + 1) * d].to_vec());
            }
        }
        let (logits, _, _) = self.head(&x[(s - 1) * d..]);
        let decoded_token = argmax(&logits);
        Ok(ForwardTrace {
            captures: trace_caps,
            decoded_token,
            answer: self.tokenizer.parse_answer(decoded_token),
            logits_last: Some(logits),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyTransformer {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        };
        ToyTransformer::new(config).unwrap()
    }

    #[test]
    fn batched_logits_match_single_sequence_path() {
        let m = small();
        let seqs: Vec<Vec<u32>> = (0..5u32)
            .map(|i| vec![1003, 100 + i, 1006, 7 * i, 1007])
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|v| v.as_slice()).collect();
        let batched = m.logits_batch(&refs).unwrap();
        for (seq, b) in seqs.iter().zip(&batched) {
            let single = m.logits(seq).unwrap();
            for (x, y) in single.iter().zip(b) {
                assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
            }
        }
        assert!(m.logits_batch(&[&[1, 2], &[1]]).is_err());
    }

    #[test]
    fn fast_tanh_matches_std() {
        for i in -400..=400 {
            let u = i as f32 * 0.05;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-6, "{u}");
        }
        assert_eq!(fast_tanh(200.0), 1.0);
        assert_eq!(fast_tanh(-200.0), -1.0);
    }
}
