// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop for the toy model: next-token cross-entropy on the answer
//! position only, AdamW, warmup plus cosine decay, global-norm clipping.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::toy::{
    acc_xt_dy, gelu_grad, int_digits, matmul, matmul_wt, rmsnorm, LayerCache, ToyTransformer,
    DIGIT_PLACES,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::stats::{Count, RateSummary};
use crate::task::{sample_instances, AdditionInstance, Answer, TemplateRegistry, MAX_INT_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub seed: u64,
    /// Loss is logged every this many steps.
    pub log_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 150,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
        }
    }
}

/// Training accuracy is measured on at most this many leading instances.
pub const TRAIN_EVAL_LIMIT: usize = 4096;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f32,
    /// (step, mean batch loss over the preceding window).
    pub loss_curve: Vec<(usize, f32)>,
    pub train_accuracy: RateSummary,
    pub heldout_accuracy: Option<RateSummary>,
}

/// A tokenized training example.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub tokens: Vec<u32>,
    pub target: u32,
}

/// RMSNorm backward: accumulates the gain gradient, returns the input gradient.
fn rmsnorm_backward(
    x: &[f32],
    inv: &[f32],
    g: &[f32],
    dy: &[f32],
    d: usize,
    dg: &mut [f32],
) -> Vec<f32> {
    let mut dx = vec![0.0f32; x.len()];
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let s = inv[r];
        let mut dot = 0.0f32;
        for j in 0..d {
            dg[j] += dyr[j] * xr[j] * s;
            dot += g[j] * dyr[j] * xr[j];
        }
        let c = dot * s * s * s / d as f32;
        for j in 0..d {
            dxr[j] = s * g[j] * dyr[j] - xr[j] * c;
        }
    }
    dx
}

impl ToyTransformer {
    /// Mean cross-entropy of the answer token over a batch of equal-length
    /// examples, accumulating parameter gradients into `grad`.
    pub(crate) fn loss_and_grad(&self, batch: &[&Example], grad: &mut [f32]) -> f32 {
        let c = &self.config;
        let (d, h, dh, ff) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff);
        let n_seq = batch.len();
        let seq_len = batch[0].tokens.len();
        debug_assert!(batch.iter().all(|e| e.tokens.len() == seq_len));
        let rows = n_seq * seq_len;
        let tokens: Vec<u32> = batch
            .iter()
            .flat_map(|e| e.tokens.iter().copied())
            .collect();

        let mut x = self.embed(&tokens, seq_len);
        let mut caches = vec![LayerCache::default(); c.n_layers];
        for (l, cache) in caches.iter_mut().enumerate() {
            self.block_forward(l, &mut x, n_seq, seq_len, false, Some(cache));
        }

        let lay = &self.layout;
        let un = &self.params[lay.unembed.range()];
        let du = &self.params[lay.digit_unembed.range()];
        let vocab = un.len() / d;
        let slots = DIGIT_PLACES * 10;
        let n_int = (MAX_INT_TOKEN as usize + 1).min(vocab);
        let lasts: Vec<usize> = (0..n_seq)
            .map(|s| (s * seq_len + seq_len - 1) * d)
            .collect();
        let states: Vec<f32> = lasts
            .iter()
            .flat_map(|&o| x[o..o + d].iter().copied())
            .collect();
        let mut nf = vec![0.0f32; n_seq * d];
        let mut inv = vec![0.0f32; n_seq];
        rmsnorm(&states, d, &self.params[lay.lnf.range()], &mut nf, &mut inv);
        let mut logits = vec![0.0f32; n_seq * vocab];
        matmul_wt(&nf, n_seq, un, vocab, d, &mut logits);
        let mut digit_scores = vec![0.0f32; n_seq * slots];
        matmul_wt(&nf, n_seq, du, slots, d, &mut digit_scores);
        let digit_table: Vec<[usize; DIGIT_PLACES]> = (0..n_int as u32).map(int_digits).collect();

        let scale = 1.0 / n_seq as f32;
        let mut loss = 0.0f32;
        let mut digit_g = vec![0.0f32; n_seq * slots];
        for (s, ex) in batch.iter().enumerate() {
            let row = &mut logits[s * vocab..(s + 1) * vocab];
            let ds = &digit_scores[s * slots..(s + 1) * slots];
            for (l, digits) in row.iter_mut().zip(&digit_table) {
                for (place, &digit) in digits.iter().enumerate() {
                    *l += ds[place * 10 + digit];
                }
            }
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|l| (l - max).exp()).sum();
            loss += (z.ln() + max - row[ex.target as usize]) * scale;
            // Reuse the logits buffer for d(loss)/d(logits).
            for l in row.iter_mut() {
                *l = (*l - max).exp() / z * scale;
            }
            row[ex.target as usize] -= scale;
            let dg = &mut digit_g[s * slots..(s + 1) * slots];
            for (g, digits) in row.iter().zip(&digit_table) {
                for (place, &digit) in digits.iter().enumerate() {
                    dg[place * 10 + digit] += g;
                }
            }
        }
        let dlogits = logits;
        acc_xt_dy(
            &dlogits,
            &nf,
            n_seq,
            vocab,
            d,
            &mut grad[lay.unembed.range()],
        );
        acc_xt_dy(
            &digit_g,
            &nf,
            n_seq,
            slots,
            d,
            &mut grad[lay.digit_unembed.range()],
        );
        let mut dnf = vec![0.0f32; n_seq * d];
        matmul(&dlogits, n_seq, un, vocab, d, &mut dnf);
        let mut dnf_digit = vec![0.0f32; n_seq * d];
        matmul(&digit_g, n_seq, du, slots, d, &mut dnf_digit);
        for (a, b) in dnf.iter_mut().zip(&dnf_digit) {
            *a += b;
        }
        let gf = &self.params[lay.lnf.range()];
        let dstates = rmsnorm_backward(&states, &inv, gf, &dnf, d, &mut grad[lay.lnf.range()]);
        let mut dx = vec![0.0f32; rows * d];
        for (&o, ds) in lasts.iter().zip(dstates.chunks_exact(d)) {
            dx[o..o + d].copy_from_slice(ds);
        }

        for l in (0..c.n_layers).rev() {
            let cc = &caches[l];
            let ll = &lay.layers[l];
            let p = |s: super::toy::Span| &self.params[s.range()];

            // MLP sublayer.
            for row in dx.chunks_exact(d) {
                for (g, v) in grad[ll.b2.range()].iter_mut().zip(row) {
                    *g += v;
                }
            }
            acc_xt_dy(&cc.act, &dx, rows, ff, d, &mut grad[ll.w2.range()]);
            let mut dhdn = vec![0.0f32; rows * ff];
            matmul_wt(&dx, rows, p(ll.w2), ff, d, &mut dhdn);
            for (g, hv) in dhdn.iter_mut().zip(&cc.hdn) {
                *g *= gelu_grad(*hv);
            }
            for row in dhdn.chunks_exact(ff) {
                for (g, v) in grad[ll.b1.range()].iter_mut().zip(row) {
                    *g += v;
                }
            }
            acc_xt_dy(&cc.n2, &dhdn, rows, d, ff, &mut grad[ll.w1.range()]);
            let mut dn2 = vec![0.0f32; rows * d];
            matmul_wt(&dhdn, rows, p(ll.w1), d, ff, &mut dn2);
            let dmid = rmsnorm_backward(
                &cc.x_mid,
                &cc.inv2,
                p(ll.ln2),
                &dn2,
                d,
                &mut grad[ll.ln2.range()],
            );
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // Attention sublayer.
            acc_xt_dy(&cc.att, &dx, rows, d, d, &mut grad[ll.wo.range()]);
            let mut datt = vec![0.0f32; rows * d];
            matmul_wt(&dx, rows, p(ll.wo), d, d, &mut datt);
            let mut dq = vec![0.0f32; rows * d];
            let mut dk = vec![0.0f32; rows * d];
            let mut dv = vec![0.0f32; rows * d];
            let sc = 1.0 / (dh as f32).sqrt();
            let mut dp = vec![0.0f32; seq_len];
            for s in 0..n_seq {
                for head in 0..h {
                    let pbase = (s * h + head) * seq_len * seq_len;
                    let off = |pos: usize| (s * seq_len + pos) * d + head * dh;
                    for i in 0..seq_len {
                        let dai = &datt[off(i)..off(i) + dh];
                        let mut wsum = 0.0f32;
                        for j in 0..=i {
                            let pij = cc.probs[pbase + i * seq_len + j];
                            let vj = &cc.v[off(j)..off(j) + dh];
                            dp[j] = dai.iter().zip(vj).map(|(a, b)| a * b).sum();
                            wsum += pij * dp[j];
                            for t in 0..dh {
                                dv[off(j) + t] += pij * dai[t];
                            }
                        }
                        for j in 0..=i {
                            let pij = cc.probs[pbase + i * seq_len + j];
                            let ds = pij * (dp[j] - wsum) * sc;
                            if ds == 0.0 {
                                continue;
                            }
                            for t in 0..dh {
                                dq[off(i) + t] += ds * cc.k[off(j) + t];
                                dk[off(j) + t] += ds * cc.q[off(i) + t];
                            }
                        }
                    }
                }
            }
            let mut dn1 = vec![0.0f32; rows * d];
            let mut tmp = vec![0.0f32; rows * d];
            for (dproj, w) in [(&dq, ll.wq), (&dk, ll.wk), (&dv, ll.wv)] {
                acc_xt_dy(&cc.n1, dproj, rows, d, d, &mut grad[w.range()]);
                matmul_wt(dproj, rows, p(w), d, d, &mut tmp);
                for (a, b) in dn1.iter_mut().zip(&tmp) {
                    *a += b;
                }
            }
            let din = rmsnorm_backward(
                &cc.x_in,
                &cc.inv1,
                p(ll.ln1),
                &dn1,
                d,
                &mut grad[ll.ln1.range()],
            );
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        for (i, &t) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let tt = t as usize;
            for (g, v) in grad[lay.tok_emb.range()][tt * d..(tt + 1) * d]
                .iter_mut()
                .zip(row)
            {
                *g += v;
            }
            if t <= MAX_INT_TOKEN {
                for (place, digit) in int_digits(t).into_iter().enumerate() {
                    let o = (place * 10 + digit) * d;
                    for (g, v) in grad[lay.digit_emb.range()][o..o + d].iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            let pp = i % seq_len;
            for (g, v) in grad[lay.pos_emb.range()][pp * d..(pp + 1) * d]
                .iter_mut()
                .zip(row)
            {
                *g += v;
            }
        }
        loss
    }

    /// Parameters subject to weight decay (matrices and embeddings).
    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        let lay = &self.layout;
        let mut spans = vec![
            lay.tok_emb,
            lay.digit_emb,
            lay.pos_emb,
            lay.unembed,
            lay.digit_unembed,
        ];
        for l in &lay.layers {
            spans.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]);
        }
        for s in spans {
            mask[s.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    decay: Vec<bool>,
}

impl AdamW {
    const B1: f32 = 0.9;
    const B2: f32 = 0.98;
    const EPS: f32 = 1e-8;

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f32, wd: f32) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t);
        let bc2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if self.decay[i] {
                params[i] -= lr * wd * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn lr_at(step: usize, hyper: &TrainHyper) -> f32 {
    if step < hyper.warmup {
        return hyper.lr * (step + 1) as f32 / hyper.warmup as f32;
    }
    let span = (hyper.steps - hyper.warmup).max(1) as f32;
    let progress = (step - hyper.warmup) as f32 / span;
    let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    hyper.lr * (0.1 + 0.9 * cosine)
}

pub(crate) fn examples(
    model: &ToyTransformer,
    registry: &TemplateRegistry,
    data: &[AdditionInstance],
) -> Result<Vec<Example>> {
    data.iter()
        .map(|inst| {
            let text = registry.render_text(inst)?;
            let tokens = model.tokenizer().encode(&text)?;
            model.check_tokens(&tokens)?;
            Ok(Example {
                tokens,
                target: model.tokenizer().int_token(inst.s)?,
            })
        })
        .collect()
}

/// Strict one-token accuracy of `model` on `data`.
pub(crate) fn strict_accuracy(
    model: &ToyTransformer,
    registry: &TemplateRegistry,
    data: &[AdditionInstance],
) -> Result<Count> {
    use rayon::prelude::*;
    let exs = examples(model, registry, data)?;
    let mut by_len: std::collections::BTreeMap<usize, Vec<&Example>> = Default::default();
    for e in &exs {
        by_len.entry(e.tokens.len()).or_default().push(e);
    }
    let chunks: Vec<&[&Example]> = by_len.values().flat_map(|g| g.chunks(EVAL_CHUNK)).collect();
    let flags: Vec<bool> = chunks
        .par_iter()
        .map(|chunk| {
            let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
            let logits = model.logits_batch(&seqs)?;
            Ok(chunk
                .iter()
                .zip(logits)
                .map(|(e, l)| {
                    model.tokenizer().parse_answer(super::toy::argmax(&l))
                        == Answer::Value(e.target)
                })
                .collect::<Vec<bool>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut c = Count::default();
    flags.into_iter().for_each(|f| c.record(f));
    Ok(c)
}

/// Train a fresh toy model on `data`; `heldout` is only evaluated.
/// Deterministic for a fixed config, data and seed.
pub fn train_toy(
    config: ModelConfig,
    data: &[AdditionInstance],
    heldout: &[AdditionInstance],
    registry: &TemplateRegistry,
    hyper: &TrainHyper,
) -> Result<(ToyTransformer, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if hyper.batch_size == 0 || hyper.steps == 0 {
        return Err(Error::InvalidArgument(
            "steps and batch_size must be positive".into(),
        ));
    }
    let mut model = ToyTransformer::new(config)?;
    let exs = examples(&model, registry, data)?;
    let mut opt = AdamW {
        m: vec![0.0; model.params.len()],
        v: vec![0.0; model.params.len()],
        t: 0,
        decay: model.decay_mask(),
    };

    let mut grad = vec![0.0f32; model.params.len()];
    let mut loss_curve = Vec::new();
    let mut window = (0.0f32, 0usize);
    let mut last_loss = f32::NAN;
    for step in 0..hyper.steps {
        let mut rng = stream(hyper.seed, "batch", step as u64);
        let picks: Vec<&Example> = (0..hyper.batch_size)
            .map(|_| &exs[rng.gen_range(0..exs.len())])
            .collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut lengths: Vec<usize> = picks.iter().map(|e| e.tokens.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut loss = 0.0f32;
        for len in lengths {
            let group: Vec<&Example> = picks
                .iter()
                .copied()
                .filter(|e| e.tokens.len() == len)
                .collect();
            let w = group.len() as f32 / picks.len() as f32;
            let mut g_group = vec![0.0f32; grad.len()];
            loss += w * model.loss_and_grad(&group, &mut g_group);
            for (g, gg) in grad.iter_mut().zip(&g_group) {
                *g += w * gg;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f32>().sqrt();
        if norm > hyper.grad_clip {
            let s = hyper.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        opt.step(
            &mut model.params,
            &grad,
            lr_at(step, hyper),
            hyper.weight_decay,
        );
        last_loss = loss;
        window.0 += loss;
        window.1 += 1;
        if (step + 1) % hyper.log_every.max(1) == 0 || step + 1 == hyper.steps {
            let mean = window.0 / window.1 as f32;
            log::info!("step {} loss {:.4}", step + 1, mean);
            loss_curve.push((step + 1, mean));
            window = (0.0, 0);
        }
    }
    let probe = &data[..data.len().min(TRAIN_EVAL_LIMIT)];
    let train_accuracy = strict_accuracy(&model, registry, probe)?.summary()?;
    let heldout_accuracy = if heldout.is_empty() {
        None
    } else {
        Some(strict_accuracy(&model, registry, heldout)?.summary()?)
    };
    Ok((
        model,
        TrainReport {
            steps: hyper.steps,
            final_loss: last_loss,
            loss_curve,
            train_accuracy,
            heldout_accuracy,
        },
    ))
}

/// Sizes of the shipped training recipe.
pub const DEFAULT_TRAIN_SIZE: usize = 100_000;
pub const DEFAULT_HELDOUT_SIZE: usize = 1_000;

/// Training and held-out instances with templates assigned round-robin over
/// `templates`. Held-out operand pairs never occur in the training set.
pub fn training_split(
    templates: &[&str],
    n_train: usize,
    n_heldout: usize,
    seed: u64,
    sum_range: (u32, u32),
) -> Result<(Vec<AdditionInstance>, Vec<AdditionInstance>)> {
    if templates.is_empty() {
        return Err(Error::InvalidArgument("no templates to train on".into()));
    }
    let assign = |mut v: Vec<AdditionInstance>| {
        for (i, inst) in v.iter_mut().enumerate() {
            inst.template_id = templates[i % templates.len()].to_owned();
        }
        v
    };
    let train = assign(sample_instances(n_train, seed, sum_range)?);
    let seen: HashSet<(u32, u32)> = train.iter().map(|i| (i.a, i.b)).collect();
    let mut heldout = Vec::with_capacity(n_heldout);
    let mut round = 1;
    while heldout.len() < n_heldout {
        let fresh = sample_instances(
            4 * n_heldout.max(64),
            derive_seed(seed, "heldout", round),
            sum_range,
        )?;
        heldout.extend(fresh.into_iter().filter(|i| !seen.contains(&(i.a, i.b))));
        heldout.truncate(n_heldout);
        round += 1;
        if round > 64 {
            return Err(Error::InsufficientSamples(format!(
                "only {} held-out pairs outside the training set",
                heldout.len()
            )));
        }
    }
    for (i, inst) in heldout.iter_mut().enumerate() {
        inst.id = i as u64;
    }
    Ok((train, assign(heldout)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::CANONICAL_TEMPLATE;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = ToyTransformer::new(tiny_config()).unwrap();
        // Larger weights so the loss is sensitive everywhere.
        for p in model.params.iter_mut() {
            *p *= 3.0;
        }
        // Tame the periodic digit features so the loss stays smooth at this step size.
        for span in [model.layout.digit_emb, model.layout.digit_unembed] {
            model.params[span.range()]
                .iter_mut()
                .for_each(|p| *p *= 0.03);
        }
        let reg = TemplateRegistry::default();
        let data = vec![
            AdditionInstance::new(0, 123, 456, CANONICAL_TEMPLATE),
            AdditionInstance::new(1, 300, 41, CANONICAL_TEMPLATE),
            AdditionInstance::new(2, 77, 505, CANONICAL_TEMPLATE),
        ];
        let exs = examples(&model, &reg, &data).unwrap();
        let batch: Vec<&Example> = exs.iter().collect();
        let mut grad = vec![0.0f32; model.params.len()];
        model.loss_and_grad(&batch, &mut grad);

        let lay = model.layout.clone();
        let mut probes: Vec<usize> = Vec::new();
        let l0 = &lay.layers[0];
        let l1 = &lay.layers[1];
        for span in [
            l0.wq,
            l0.wk,
            l0.wv,
            l0.wo,
            l0.ln1,
            l0.w1,
            l0.b1,
            l1.w2,
            l1.b2,
            l1.ln2,
            lay.lnf,
            lay.digit_emb,
            lay.pos_emb,
            lay.digit_unembed,
        ] {
            probes.extend((0..40).map(|i| span.start + (i * 37 + 5) % span.len));
        }
        probes.push(lay.tok_emb.start + 1001 * 16 + 3);
        probes.push(lay.digit_emb.start + (1 * 10 + 2) * 16 + 5);
        probes.push(lay.pos_emb.start + 2 * 16 + 1);
        probes.push(lay.unembed.start + 579 * 16 + 4);
        probes.push(lay.digit_unembed.start + (3 * 10 + 9) * 16 + 2);

        let eps = 3e-3f32;
        let mut scratch = vec![0.0f32; model.params.len()];
        let mut checked = 0;
        for &i in &probes {
            let orig = model.params[i];
            model.params[i] = orig + eps;
            let up = model.loss_and_grad(&batch, &mut scratch);
            model.params[i] = orig - eps;
            let down = model.loss_and_grad(&batch, &mut scratch);
            model.params[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = grad[i];
            let tol = 2e-2 * fd.abs().max(an.abs()) + 2e-3;
            assert!(
                (fd - an).abs() <= tol,
                "param {i}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, probes.len());
    }

    #[test]
    fn training_is_deterministic_and_fits_a_small_set() {
        let reg = TemplateRegistry::default();
        let data = crate::task::sample_instances(64, 5, crate::task::DEFAULT_SUM_RANGE).unwrap();
        let hyper = TrainHyper {
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
            warmup: 20,
            log_every: 50,
            ..TrainHyper::default()
        };
        let config = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            ..ModelConfig::default()
        };
        let (m1, r1) = train_toy(config.clone(), &data, &[], &reg, &hyper).unwrap();
        let (m2, _) = train_toy(config, &data, &[], &reg, &hyper).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(r1.train_accuracy.rate, 1.0, "{r1:?}");
    }

    #[test]
    fn split_is_disjoint_and_mixes_templates() {
        let (train, held) =
            training_split(&["canonical", "prompt1"], 500, 100, 3, (200, 999)).unwrap();
        assert_eq!((train.len(), held.len()), (500, 100));
        let seen: HashSet<(u32, u32)> = train.iter().map(|i| (i.a, i.b)).collect();
        assert!(held.iter().all(|i| !seen.contains(&(i.a, i.b))));
        assert_eq!(train[1].template_id, "prompt1");
        assert_eq!(held[2].template_id, "canonical");
        assert!(training_split(&[], 5, 5, 0, (200, 999)).is_err());
    }

    #[test]
    fn empty_data_is_rejected() {
        let reg = TemplateRegistry::default();
        assert!(train_toy(tiny_config(), &[], &[], &reg, &TrainHyper::default()).is_err());
    }
}
