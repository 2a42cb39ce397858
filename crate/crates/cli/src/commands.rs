// SPDX-License-Identifier: MIT OR Apache-2.0
//! Subcommand implementations. Each writes its artifacts and a manifest into
//! the output directory.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::info;
use residforge_core::alignment::{align, layerwise_summary, AlignmentBundle};
use residforge_core::bridge::{BridgeClient, Endpoint};
use residforge_core::directions::{
    collect_states_multi, dictionaries, ensure_support, DirectionDictionary, StateBatch, StateCache,
};
use residforge_core::editing::{
    aggregate, calibrated_grid, delta_stratified, diagnostics, evaluate_layer,
    prompts_from_instances, transport_run, DirectionSource, EditConfig, LabeledPrompt,
    LayerDirections, LayerSetup,
};
use residforge_core::localization::{ablation_sweep, detect_boundary, patch_sweep, PatchMode};
use residforge_core::model::{
    load_checkpoint, save_checkpoint, train_toy, training_split, SubjectModel,
};
use residforge_core::oracle::synth_suite;
use residforge_core::report::{self, Manifest};
use residforge_core::rng::derive_seed;
use residforge_core::synthlab::{linear_readout_subject, plant_truth, Planted, SynthSubject};
use residforge_core::task::{
    baseline_filter, baseline_filter_pairs, sample_instances, sample_pairs, AdditionInstance,
    Place, TemplateRegistry,
};
use residforge_core::{Error, Result};
use serde::Serialize;

use crate::config::{Backend, RunConfig};

/// A loaded subject. The synthetic subject keeps its planted truth.
enum Subject {
    Model(Box<dyn SubjectModel>),
    Synth(Box<SynthSubject>),
}

impl Subject {
    fn model(&self) -> &dyn SubjectModel {
        match self {
            Subject::Model(m) => m.as_ref(),
            Subject::Synth(s) => s.as_ref(),
        }
    }

    fn text_model(&self, command: &str) -> Result<&dyn SubjectModel> {
        match self {
            Subject::Model(m) => Ok(m.as_ref()),
            Subject::Synth(_) => Err(Error::Config(format!(
                "`{command}` needs a toy or bridge backend"
            ))),
        }
    }
}

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    registry: TemplateRegistry,
    manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, cfg: RunConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let manifest = Manifest::new(command, cfg.seed, serde_json::to_value(&cfg)?)?;
        Ok(Self {
            cfg,
            out,
            registry: TemplateRegistry::default(),
            manifest,
        })
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label, 0)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let h = report::write_csv(&self.out.join(name), rows)?;
        self.manifest.add_output(name, h);
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let h = report::write_jsonl(&self.out.join(name), rows)?;
        self.manifest.add_output(name, h);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let h = report::write_json(&self.out.join(name), value)?;
        self.manifest.add_output(name, h);
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        if !self.manifest.notes.is_object() {
            self.manifest.notes = serde_json::json!({});
        }
        self.manifest.notes[key] = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.manifest.write(&self.out)?;
        Ok(())
    }

    fn planted(&self) -> Result<Planted> {
        plant_truth(&self.cfg.synth)
    }

    fn place(&self) -> Result<Place> {
        self.cfg.setting.place().ok_or_else(|| {
            Error::Config(format!(
                "setting {} has no digit place to edit",
                self.cfg.setting
            ))
        })
    }

    fn subject(&mut self) -> Result<Subject> {
        match self.cfg.backend {
            Backend::Toy => {
                let path = self.cfg.checkpoint.clone().ok_or_else(|| {
                    Error::Config("the toy backend needs `checkpoint` (see train-toy)".into())
                })?;
                self.manifest.add_input(&path)?;
                Ok(Subject::Model(Box::new(load_checkpoint(&path)?)))
            }
            Backend::Bridge => {
                let ep: Endpoint = self
                    .cfg
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::Config("the bridge backend needs `endpoint`".into()))?
                    .parse()?;
                Ok(Subject::Model(Box::new(BridgeClient::connect(&ep)?)))
            }
            Backend::Synth => {
                let planted = self.planted()?;
                let place = self.cfg.setting.place().unwrap_or(Place::Ones);
                Ok(Subject::Synth(Box::new(linear_readout_subject(
                    &planted, place,
                )?)))
            }
        }
    }

    fn layers(&self, model: &dyn SubjectModel) -> Result<Vec<usize>> {
        let n = model.meta().n_layers;
        match self.cfg.layers {
            Some(r) => r.indices(n),
            None => Ok((0..n).collect()),
        }
    }

    fn instances(&self, label: &str) -> Result<Vec<AdditionInstance>> {
        self.registry.get(&self.cfg.template)?;
        let mut v = sample_instances(self.cfg.instances, self.seed(label), self.cfg.sum_range)?;
        for inst in &mut v {
            inst.template_id = self.cfg.template.clone();
        }
        Ok(v)
    }

    fn pairs(&self) -> Result<Vec<(AdditionInstance, AdditionInstance)>> {
        if self.cfg.pairs == 0 {
            return Err(Error::InvalidArgument("`pairs` must be at least 1".into()));
        }
        self.registry.get(&self.cfg.template)?;
        let mut pairs = sample_pairs(self.cfg.pairs, self.seed("pairs"), self.cfg.sum_range)?;
        for (a, b) in &mut pairs {
            a.template_id = self.cfg.template.clone();
            b.template_id = self.cfg.template.clone();
        }
        Ok(pairs)
    }

    /// Prompts for direction learning, with every (context, value) cell covered.
    fn dictionary_instances(&self) -> Result<Vec<AdditionInstance>> {
        let mut v = self.instances("dictionary")?;
        let contexts = self.cfg.setting.contexts(self.cfg.sum_range);
        ensure_support(
            &mut v,
            self.cfg.setting,
            &contexts,
            self.cfg.per_cell,
            self.seed("support"),
            self.cfg.sum_range,
        )?;
        for inst in &mut v {
            inst.template_id = self.cfg.template.clone();
        }
        Ok(v)
    }

    fn states(&self, subject: &Subject, layers: &[usize]) -> Result<Vec<StateBatch>> {
        match subject {
            Subject::Synth(s) => Ok(vec![s.planted().states()?]),
            Subject::Model(m) => {
                let insts = self.dictionary_instances()?;
                match StateCache::from_env() {
                    Some(cache) => cache.get_or_collect(
                        m.as_ref(),
                        &self.registry,
                        &insts,
                        layers,
                        self.cfg.setting,
                        &self.cfg.template,
                        self.cfg.seed,
                    ),
                    None => collect_states_multi(
                        m.as_ref(),
                        &self.registry,
                        &insts,
                        layers,
                        self.cfg.setting,
                    ),
                }
            }
        }
    }

    fn contexts_values(&self, subject: &Subject) -> (Vec<i64>, Vec<i64>) {
        match subject {
            Subject::Synth(s) => {
                let spec = &s.planted().spec;
                (spec.contexts.clone(), spec.values.clone())
            }
            Subject::Model(_) => (
                self.cfg.setting.contexts(self.cfg.sum_range),
                self.cfg.setting.values(),
            ),
        }
    }

    fn rank(&self, subject: &Subject) -> usize {
        match (subject, self.cfg.rank) {
            (_, Some(r)) => r,
            (Subject::Synth(s), None) => s.planted().spec.rank,
            (Subject::Model(_), None) => self.cfg.setting.default_rank(),
        }
    }

    fn layers_for(&self, subject: &Subject) -> Result<Vec<usize>> {
        match subject {
            Subject::Synth(_) => Ok(vec![0]),
            Subject::Model(m) => self.layers(m.as_ref()),
        }
    }

    fn learn_dictionaries(
        &self,
        subject: &Subject,
    ) -> Result<BTreeMap<usize, BTreeMap<i64, DirectionDictionary>>> {
        let layers = self.layers_for(subject)?;
        let (contexts, values) = self.contexts_values(subject);
        self.states(subject, &layers)?
            .iter()
            .map(|b| {
                Ok((
                    b.layer,
                    dictionaries(b, &contexts, &values, self.cfg.min_samples)?,
                ))
            })
            .collect()
    }

    fn learn(&self, subject: &Subject) -> Result<BTreeMap<usize, LayerDirections>> {
        let rank = self.rank(subject);
        self.learn_dictionaries(subject)?
            .into_iter()
            .map(|(l, dicts)| {
                let bundle = align(&dicts, rank)?;
                Ok((l, LayerDirections { dicts, bundle }))
            })
            .collect()
    }

    fn edit_config(&self) -> EditConfig {
        EditConfig {
            modes: self.cfg.edit.modes.clone(),
            c_ref: self.cfg.edit.c_ref,
            grid: calibrated_grid(&self.cfg.edit.grid),
            n_anchors: self.cfg.edit.anchors,
            max_targets: self.cfg.edit.max_targets,
            seed: self.seed("edit"),
        }
    }

    /// Editing prompts: baseline-correct instances, or planted samples for
    /// the synthetic subject (contexts other than the reference).
    fn edit_prompts(&self, subject: &Subject) -> Result<Vec<LabeledPrompt>> {
        match subject {
            Subject::Synth(s) => {
                let spec = &s.planted().spec;
                let cells: Vec<(i64, i64)> = spec
                    .contexts
                    .iter()
                    .filter(|&&c| c != self.cfg.edit.c_ref)
                    .flat_map(|&c| spec.values.iter().map(move |&v| (c, v)))
                    .collect();
                (0..self.cfg.instances as u64)
                    .map(|i| {
                        let (c, v) = cells[i as usize % cells.len()];
                        // Noise draws disjoint from the dictionary samples.
                        let idx = spec.per_cell as u64 + i;
                        Ok(LabeledPrompt {
                            id: i,
                            tokens: s.prompt(c, v, idx)?,
                            gold: s.answer_for(v),
                            context: c,
                            value: v,
                        })
                    })
                    .collect()
            }
            Subject::Model(m) => {
                let base = baseline_filter(m.as_ref(), &self.registry, &self.instances("edit")?)?;
                info!("editing on {} baseline-correct prompts", base.correct.len());
                prompts_from_instances(m.as_ref(), &self.registry, &base.correct, self.cfg.setting)
            }
        }
    }
}

pub fn gen(run: &mut Run) -> Result<()> {
    let instances = run.instances("instances")?;
    run.jsonl("instances.jsonl", &instances)?;
    let pairs = run.pairs()?;
    run.jsonl("pairs.jsonl", &pairs)?;
    println!("{} instances, {} pairs", instances.len(), pairs.len());
    Ok(())
}

pub fn train(run: &mut Run) -> Result<()> {
    let t = run.cfg.train.clone();
    let ids: Vec<&str> = t.templates.iter().map(String::as_str).collect();
    for id in &ids {
        run.registry.get(id)?;
    }
    let (data, heldout) = training_split(
        &ids,
        t.n_train,
        t.n_heldout,
        run.seed("train-data"),
        run.cfg.sum_range,
    )?;
    let hyper = residforge_core::model::TrainHyper {
        seed: run.seed("train"),
        ..t.hyper
    };
    let started = std::time::Instant::now();
    let (model, rep) = train_toy(t.model, &data, &heldout, &run.registry, &hyper)?;
    info!("trained in {:.1?}", started.elapsed());
    let h = save_checkpoint(&model, &run.out.join("toy.rsaf"))?;
    run.manifest.add_output("toy.rsaf", h);
    #[derive(Serialize)]
    struct LossRow {
        step: usize,
        loss: f32,
    }
    let rows: Vec<LossRow> = rep
        .loss_curve
        .iter()
        .map(|&(step, loss)| LossRow { step, loss })
        .collect();
    run.csv("loss_curve.csv", &rows)?;
    run.json("train_report.json", &rep)?;
    if let Some(acc) = rep.heldout_accuracy {
        println!(
            "held-out strict accuracy {:.4} [{:.4}, {:.4}] (n={})",
            acc.rate, acc.wilson_lo, acc.wilson_hi, acc.n
        );
    }
    Ok(())
}

pub fn baseline(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    let model = subject.text_model("baseline")?;
    let rep = baseline_filter(model, &run.registry, &run.instances("instances")?)?;
    let s = rep.count.summary()?;
    run.json("baseline.json", &s)?;
    run.jsonl("baseline_correct.jsonl", &rep.correct)?;
    println!(
        "baseline strict accuracy {:.4} [{:.4}, {:.4}] (n={})",
        s.rate, s.wilson_lo, s.wilson_hi, s.n
    );
    Ok(())
}

pub fn patch(run: &mut Run) -> Result<()> {
    let pairs = run.pairs()?;
    let subject = run.subject()?;
    let model = subject.text_model("patch-sweep")?;
    let layers = run.layers(model)?;
    let kept = baseline_filter_pairs(model, &run.registry, &pairs)?;
    if kept.is_empty() {
        return Err(Error::InsufficientSamples(
            "no pair is baseline-correct on both prompts".into(),
        ));
    }
    let (results, records) = patch_sweep(model, &run.registry, &kept, &layers, &PatchMode::all())?;
    let boundary = detect_boundary(&results, run.cfg.tau_hi, run.cfg.tau_lo)?;
    run.csv("patch_curve.csv", &report::patch_curve_rows(&results)?)?;
    run.csv(
        "patch_table.csv",
        &report::patch_range_rows(&results, boundary)?,
    )?;
    run.jsonl("patch_records.jsonl", &records)?;
    run.note("pairs_sampled", pairs.len())?;
    run.note("pairs_used", kept.len())?;
    run.note("boundary_layer", boundary.map(|b| b + 1))?;
    match boundary {
        Some(b) => println!("boundary at layer {} ({} pairs)", b + 1, kept.len()),
        None => println!("no boundary ({} pairs)", kept.len()),
    }
    Ok(())
}

pub fn ablate(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    let model = subject.text_model("ablate")?;
    let n = model.meta().n_layers;
    let base = baseline_filter(model, &run.registry, &run.instances("instances")?)?;
    if base.correct.is_empty() {
        return Err(Error::InsufficientSamples(
            "no baseline-correct instance".into(),
        ));
    }
    let mut starts = vec![n];
    starts.extend(run.layers(model)?);
    let results = ablation_sweep(model, &run.registry, &base.correct, &starts)?;
    run.csv("ablation.csv", &report::ablation_rows(&results, n)?)?;
    run.note("baseline_correct", base.correct.len())?;
    for r in report::ablation_rows(&results, n)? {
        println!("{:>16}  {:6.2}%", r.ablated_layers, r.accuracy_pct);
    }
    Ok(())
}

pub fn collect(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    let layers = run.layers_for(&subject)?;
    for b in run.states(&subject, &layers)? {
        let name = format!("states_L{}.rsaf", b.layer + 1);
        let h = b.save(&run.out.join(&name))?;
        run.manifest.add_output(&name, h);
        println!("layer {}: {} states", b.layer + 1, b.len());
    }
    Ok(())
}

pub fn learn_dict(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    #[derive(Serialize)]
    struct DictRow {
        layer: usize,
        context: i64,
        value: i64,
        positives: usize,
        negatives: usize,
        raw_norm: f64,
    }
    let mut rows = Vec::new();
    for (layer, dicts) in run.learn_dictionaries(&subject)? {
        for (c, d) in &dicts {
            let name = format!("dict_L{}_c{c}.rsaf", layer + 1);
            let h = d.save(&run.out.join(&name))?;
            run.manifest.add_output(&name, h);
            for (i, &v) in d.values.iter().enumerate() {
                rows.push(DictRow {
                    layer: layer + 1,
                    context: *c,
                    value: v,
                    positives: d.positives[i],
                    negatives: d.negatives[i],
                    raw_norm: d.raw_norms[i],
                });
            }
        }
    }
    run.csv("dictionaries.csv", &rows)?;
    println!("{} dictionary rows", rows.len());
    Ok(())
}

pub fn align_cmd(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    let learned = run.learn(&subject)?;
    let bundles: Vec<AlignmentBundle> = learned.values().map(|l| l.bundle.clone()).collect();
    #[derive(Serialize)]
    struct PairRow {
        layer: usize,
        from: i64,
        to: i64,
        cos_unaligned: f64,
        cos_proc: f64,
        relfro: f64,
    }
    let mut pairs = Vec::new();
    for b in &bundles {
        let name = format!("bundle_L{}.rsaf", b.layer + 1);
        let h = b.save(&run.out.join(&name))?;
        run.manifest.add_output(&name, h);
        pairs.extend(b.pairs.iter().filter(|p| p.from != p.to).map(|p| PairRow {
            layer: b.layer + 1,
            from: p.from,
            to: p.to,
            cos_unaligned: p.metrics.cos_unaligned,
            cos_proc: p.metrics.cos_proc,
            relfro: p.metrics.relfro,
        }));
    }
    let setting = run.cfg.setting.to_string();
    let rows = report::alignment_rows(&setting, &layerwise_summary(&bundles)?);
    run.csv("alignment.csv", &rows)?;
    run.csv("alignment_pairs.csv", &pairs)?;
    run.note("rank", run.rank(&subject))?;
    for r in &rows {
        println!(
            "layer {:>3}  unaligned {:.3}±{:.3}  procrustes {:.3}±{:.3}  relfro {:.3}",
            r.layer,
            r.unaligned_mean,
            r.unaligned_std,
            r.procrustes_mean,
            r.procrustes_std,
            r.relfro_mean
        );
    }
    Ok(())
}

pub fn edit(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    let place = run.place()?;
    let learned = run.learn(&subject)?;
    let prompts = run.edit_prompts(&subject)?;
    let config = run.edit_config();
    let mut records = Vec::new();
    let mut scales = BTreeMap::new();
    for (&layer, ld) in &learned {
        let setup = LayerSetup {
            source: DirectionSource {
                dicts: &ld.dicts,
                bundle: &ld.bundle,
                c_ref: config.c_ref,
            },
            place,
            layer,
            seed: derive_seed(config.seed, "layer", layer as u64),
        };
        let res = evaluate_layer(subject.model(), &prompts, setup, &config)?;
        info!(
            "layer {}: {} records, {} anchors, {} excluded",
            layer + 1,
            res.records.len(),
            res.anchors,
            res.excluded
        );
        scales.insert(
            layer + 1,
            serde_json::json!({
                "selected": res.scales,
                "anchor_scores": res.anchor_scores
                    .iter()
                    .map(|(m, v)| (m.to_string(), v))
                    .collect::<BTreeMap<_, _>>(),
                "anchors": res.anchors,
                "excluded": res.excluded,
            }),
        );
        records.extend(res.records);
    }
    let delta_layers: Vec<usize> = run
        .cfg
        .edit
        .delta_layers
        .iter()
        .map(|l| l.saturating_sub(1))
        .collect();
    let agg = aggregate(&records)?;
    let strat = delta_stratified(
        &records,
        (!delta_layers.is_empty()).then_some(&delta_layers[..]),
    )?;
    run.csv("edit_aggregate.csv", &report::edit_rows(&agg))?;
    run.csv("edit_delta.csv", &report::edit_rows(&strat))?;
    run.csv(
        "edit_diagnostics.csv",
        &report::diagnostics_rows(&diagnostics(&records)?),
    )?;
    run.json("edit_scales.json", &scales)?;
    run.jsonl("edit_records.jsonl", &records)?;
    for r in agg.iter().filter(|r| r.layer.is_some()) {
        println!(
            "{:<16} layer {:>3}  {:.4} [{:.4}, {:.4}] (n={})",
            r.mode.to_string(),
            r.layer.map_or(0, |l| l + 1),
            r.summary.rate,
            r.summary.wilson_lo,
            r.summary.wilson_hi,
            r.summary.n
        );
    }
    Ok(())
}

pub fn transport(run: &mut Run) -> Result<()> {
    let subject = run.subject()?;
    let model = subject.text_model("transport")?;
    let learned = run.learn(&subject)?;
    let templates: Vec<&str> = run
        .cfg
        .edit
        .transport_templates
        .iter()
        .map(String::as_str)
        .collect();
    let config = run.edit_config();
    let curves = transport_run(
        model,
        &run.registry,
        &templates,
        &run.instances("edit")?,
        run.cfg.setting,
        &learned,
        &config,
    )?;
    run.csv("transport.csv", &report::transport_rows(&curves))?;
    let scales: BTreeMap<&str, _> = curves
        .iter()
        .map(|c| (c.template_id.as_str(), &c.scales))
        .collect();
    run.json("transport_scales.json", &scales)?;
    for c in &curves {
        println!(
            "{:<10} baseline {:.4} (n={})",
            c.template_id, c.baseline.rate, c.baseline.n
        );
    }
    Ok(())
}

pub fn synth_verify(run: &mut Run) -> Result<()> {
    let checks = synth_suite(run.cfg.seed)?;
    run.csv("synth_verify.csv", &checks)?;
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "oracle checks failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
