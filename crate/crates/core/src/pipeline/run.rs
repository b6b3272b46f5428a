// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::cells::{self, AblationOutput, AttentionOutput, CellOutput, ModNounOutput, OneBackOutput, Phase1Output};
use super::config::{Analysis, ModelSpec, RawcSchema, RunConfig};
use super::manifest::{
    checkpoint_digest, combine, sha256_file, sha256_hex, write_atomic, CellRecord, CellStatus, RunManifest,
};
use super::sweep::{self, AblationSweep, CompositeSweep, ModnounSweep, OneBackSweep, Phase1Sweep};
use super::tables;
use crate::ablation::{default_head_sets, specs_for, AblationKind, AblationSpec};
use crate::engine::{load_checkpoint, Checkpoint};
use crate::error::{ProbeError, Result};
use crate::hub::{checkpoint_schedule, revision_name, HubClient, Schedule};
use crate::parallel;
use crate::stimuli::{
    load_modnoun, load_pairs, load_pos_stimuli, make_positional_variant, ModNounItem, PerturbedStimulus, StimulusPair,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Reuse completed cells whose inputs are unchanged.
    pub resume: bool,
    /// `(model id, step)` filters; an empty list selects every cell.
    pub only: Vec<(String, Option<u64>)>,
    /// Overrides `workers` from the config.
    pub workers: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            resume: true,
            only: Vec::new(),
            workers: None,
        }
    }
}

/// Parse `model:step`, `model` or `model:` into a filter.
pub fn parse_only(s: &str) -> Result<(String, Option<u64>)> {
    let (model, step) = match s.rsplit_once(':') {
        Some((m, "")) => (m, None),
        Some((m, st)) => {
            let st = st.trim_start_matches("step");
            (
                m,
                Some(
                    st.parse::<u64>()
                        .map_err(|_| ProbeError::Config(format!("bad step in --only `{s}`")))?,
                ),
            )
        }
        None => (s, None),
    };
    if model.is_empty() {
        return Err(ProbeError::Config(format!("--only `{s}` names no model")));
    }
    Ok((model.to_string(), step))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub computed: usize,
    pub reused: usize,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.manifest.failed()
    }

    /// 0 when every cell finished, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.manifest.cells.iter().any(|c| c.status != CellStatus::Done))
    }
}

/// Stimuli shared by every cell, with file digests.
struct Stimuli {
    nouns: Vec<StimulusPair>,
    positional: Vec<PerturbedStimulus>,
    pos: Vec<PerturbedStimulus>,
    modnoun: Vec<ModNounItem>,
    rawc_digest: String,
    positional_digest: String,
    pos_digest: String,
    modnoun_digest: String,
    notes: Vec<String>,
}

fn detect_schema(path: &Path) -> Result<RawcSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    Ok(
        if header.split(',').any(|c| c.trim().trim_matches('"') == "sentence_a") {
            RawcSchema::Canonical
        } else {
            RawcSchema::Rawc
        },
    )
}

fn load_stimuli(cfg: &RunConfig) -> Result<Stimuli> {
    let d = &cfg.datasets;
    let mut s = Stimuli {
        nouns: Vec::new(),
        positional: Vec::new(),
        pos: Vec::new(),
        modnoun: Vec::new(),
        rawc_digest: String::new(),
        positional_digest: String::new(),
        pos_digest: String::new(),
        modnoun_digest: String::new(),
        notes: Vec::new(),
    };
    let needs_rawc = [Analysis::Phase1, Analysis::StressOneBack, Analysis::Ablation]
        .iter()
        .any(|a| cfg.wants(*a))
        || (cfg.wants(Analysis::StressPositional) && d.positional.is_none());
    if let (true, Some(path)) = (needs_rawc, &d.rawc) {
        let schema = match d.rawc_schema {
            Some(s) => s,
            None => detect_schema(path)?,
        };
        let set = load_pairs(path, &schema.columns())?;
        if !set.rejects.is_empty() {
            s.notes.push(format!("rawc: {} rows rejected", set.rejects.len()));
        }
        s.nouns = set.nouns_only();
        s.rawc_digest = sha256_file(path)?;
        if cfg.wants(Analysis::StressPositional) && d.positional.is_none() {
            let mut derived = 0;
            for p in set.pairs.iter().filter(|p| !p.same_sense) {
                if let Ok(v) = make_positional_variant(p, &d.positional_phrase) {
                    s.positional.extend(v);
                    derived += 1;
                }
            }
            s.notes.push(format!(
                "positional: derived {} sentences from {derived} rawc pairs with `{}`",
                s.positional.len(),
                d.positional_phrase
            ));
            s.positional_digest = combine(&[("rawc", &s.rawc_digest), ("phrase", &d.positional_phrase)]);
        }
    }
    if let (true, Some(path)) = (cfg.wants(Analysis::StressPositional), &d.positional) {
        let set = load_pos_stimuli(path)?;
        if !set.rejects.is_empty() {
            s.notes.push(format!("positional: {} rows rejected", set.rejects.len()));
        }
        s.positional = set.items;
        s.positional_digest = sha256_file(path)?;
    }
    if let (true, Some(path)) = (cfg.wants(Analysis::StressPos), &d.pos) {
        let set = load_pos_stimuli(path)?;
        if !set.rejects.is_empty() {
            s.notes.push(format!("pos: {} rows rejected", set.rejects.len()));
        }
        s.pos = set.items;
        s.pos_digest = sha256_file(path)?;
    }
    if let (true, Some(path)) = (cfg.wants(Analysis::Modnoun), &d.modnoun) {
        let (items, rejects) = load_modnoun(path)?;
        if !rejects.is_empty() {
            s.notes.push(format!("modnoun: {} rows rejected", rejects.len()));
        }
        s.modnoun = items;
        s.modnoun_digest = sha256_file(path)?;
    }
    Ok(s)
}

fn slug(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cell_path(model: &str, step: Option<u64>, analysis: Analysis) -> String {
    match step {
        Some(s) => format!("cells/{}/step{s}/{analysis}.json", slug(model)),
        None => format!("cells/{}/sweep/{analysis}.json", slug(model)),
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    previous: Option<RunManifest>,
    only: &'a [(String, Option<u64>)],
    hub: Option<HubClient>,
}

enum Cell<T> {
    Reused(CellRecord, T),
    Todo,
}

impl Ctx<'_> {
    fn selected(&self, model: &str, step: Option<u64>) -> bool {
        self.only.is_empty()
            || self
                .only
                .iter()
                .any(|(m, s)| m == model && (s.is_none() || step.is_none() || *s == step))
    }

    /// The previous result for this cell when its output is intact and,
    /// with `input` given, its inputs are unchanged.
    fn reusable<T: DeserializeOwned>(
        &self,
        model: &str,
        step: Option<u64>,
        a: Analysis,
        input: Option<&str>,
    ) -> Option<(CellRecord, T)> {
        let prev = self.previous.as_ref()?.cell(model, step, a)?;
        if prev.status != CellStatus::Done || input.is_some_and(|i| prev.input_digest != i) {
            return None;
        }
        let rel = prev.output.as_ref()?;
        let bytes = std::fs::read(self.out.join(rel)).ok()?;
        if Some(sha256_hex(&bytes)) != prev.output_digest {
            return None;
        }
        Some((prev.clone(), serde_json::from_slice(&bytes).ok()?))
    }

    fn lookup<T: DeserializeOwned>(&self, model: &str, step: Option<u64>, a: Analysis, input: &str) -> Cell<T> {
        match self.reusable(model, step, a, Some(input)) {
            Some((r, v)) => Cell::Reused(r, v),
            None => Cell::Todo,
        }
    }

    fn store<T: Serialize>(
        &self,
        model: &str,
        step: Option<u64>,
        a: Analysis,
        input: String,
        started: Instant,
        value: &Result<T>,
    ) -> CellRecord {
        let elapsed_ms = started.elapsed().as_millis() as u64;
        let base = CellRecord {
            model: model.to_string(),
            step,
            analysis: a,
            status: CellStatus::Done,
            input_digest: input,
            output: None,
            output_digest: None,
            elapsed_ms,
            error: None,
        };
        let written = value.as_ref().map_err(|e| e.to_string()).and_then(|v| {
            let rel = cell_path(model, step, a);
            let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| e.to_string())?;
            bytes.push(b'\n');
            write_atomic(&self.out.join(&rel), &bytes).map_err(|e| e.to_string())?;
            Ok((rel, sha256_hex(&bytes)))
        });
        match written {
            Ok((rel, digest)) => CellRecord {
                output: Some(rel),
                output_digest: Some(digest),
                ..base
            },
            Err(msg) => {
                log::error!(
                    "{model} {} {a}: {msg}",
                    step.map_or("sweep".into(), |s| format!("step{s}"))
                );
                CellRecord {
                    status: CellStatus::Failed,
                    error: Some(msg),
                    ..base
                }
            }
        }
    }

    fn blocked(model: &str, step: Option<u64>, a: Analysis, why: String) -> CellRecord {
        CellRecord {
            model: model.to_string(),
            step,
            analysis: a,
            status: CellStatus::Blocked,
            input_digest: String::new(),
            output: None,
            output_digest: None,
            elapsed_ms: 0,
            error: Some(why),
        }
    }

    fn checkpoint_dir(&self, m: &ModelSpec, step: u64) -> Result<PathBuf> {
        match (&m.path, &m.repo_id, &self.hub) {
            (Some(root), _, _) => {
                let dir = root.join(revision_name(step));
                if dir.join("config.json").is_file() {
                    Ok(dir)
                } else {
                    Err(ProbeError::NotFound {
                        what: dir.display().to_string(),
                        nearby: Vec::new(),
                    })
                }
            }
            (None, Some(repo), Some(hub)) => Ok(hub.fetch_checkpoint(repo, &revision_name(step))?.local_dir),
            _ => Err(ProbeError::Config(format!("model `{}` has no source", m.label))),
        }
    }
}

/// Per-model state gathered across stages.
#[derive(Default)]
pub struct ModelResults {
    pub id: String,
    pub label: String,
    pub run: String,
    pub steps: Vec<u64>,
    pub phase1: BTreeMap<u64, Phase1Output>,
    pub oneback: BTreeMap<u64, OneBackOutput>,
    pub positional: BTreeMap<u64, AttentionOutput>,
    pub pos: BTreeMap<u64, AttentionOutput>,
    pub modnoun: BTreeMap<u64, ModNounOutput>,
    pub ablation: BTreeMap<u64, AblationOutput>,
    pub phase1_sweep: Option<Phase1Sweep>,
    pub oneback_sweep: Option<OneBackSweep>,
    pub composite: Option<CompositeSweep>,
    pub ablation_sweep: Option<AblationSweep>,
    ckpt_digest: BTreeMap<u64, String>,
}

struct UnitResult {
    records: Vec<CellRecord>,
    outputs: Vec<(u64, CellOutput)>,
    computed: usize,
    reused: usize,
}

const STEP_ANALYSES: [Analysis; 5] = [
    Analysis::Phase1,
    Analysis::StressOneBack,
    Analysis::StressPositional,
    Analysis::StressPos,
    Analysis::Modnoun,
];

fn step_input(ctx: &Ctx, stim: &Stimuli, a: Analysis, ckpt: &str) -> String {
    let agg = format!("{:?}", ctx.cfg.probe.aggregation);
    let data = match a {
        Analysis::Phase1 | Analysis::StressOneBack => stim.rawc_digest.as_str(),
        Analysis::StressPositional => stim.positional_digest.as_str(),
        Analysis::StressPos => stim.pos_digest.as_str(),
        Analysis::Modnoun => stim.modnoun_digest.as_str(),
        _ => "",
    };
    combine(&[
        ("tool", TOOL_VERSION),
        ("analysis", a.as_str()),
        ("checkpoint", ckpt),
        ("data", data),
        ("aggregation", &agg),
    ])
}

fn unit_stage_a(ctx: &Ctx, stim: &Stimuli, m: &ModelSpec, step: u64) -> (UnitResult, Option<String>) {
    let id = m.id();
    let wanted: Vec<Analysis> = STEP_ANALYSES.iter().copied().filter(|a| ctx.cfg.wants(*a)).collect();
    let mut res = UnitResult {
        records: Vec::new(),
        outputs: Vec::new(),
        computed: 0,
        reused: 0,
    };
    if !ctx.selected(&id, Some(step)) {
        // Outside `--only`: carry completed cells forward untouched.
        for a in &wanted {
            if let Some((r, v)) = ctx.reusable::<CellOutput>(&id, Some(step), *a, None) {
                res.records.push(r);
                res.outputs.push((step, v));
                res.reused += 1;
            }
        }
        return (res, None);
    }
    let started = Instant::now();
    let resolved = ctx
        .checkpoint_dir(m, step)
        .and_then(|dir| checkpoint_digest(&dir).map(|d| (dir, d)));
    let (dir, ckpt) = match resolved {
        Ok(v) => v,
        Err(e) => {
            for a in &wanted {
                res.records
                    .push(ctx.store::<()>(&id, Some(step), *a, String::new(), started, &Err(e.clone_msg())));
            }
            return (res, None);
        }
    };
    let mut todo = Vec::new();
    for a in &wanted {
        let input = step_input(ctx, stim, *a, &ckpt);
        match ctx.lookup::<CellOutput>(&id, Some(step), *a, &input) {
            Cell::Reused(r, v) => {
                res.records.push(r);
                res.outputs.push((step, v));
                res.reused += 1;
            }
            Cell::Todo => todo.push((*a, input)),
        }
    }
    if todo.is_empty() {
        return (res, Some(ckpt));
    }
    let ck = match load_checkpoint(&dir) {
        Ok(ck) => ck,
        Err(e) => {
            let e = e.clone_msg();
            for (a, input) in todo {
                res.records
                    .push(ctx.store::<()>(&id, Some(step), a, input, started, &Err(e.clone_msg())));
            }
            return (res, Some(ckpt));
        }
    };
    let cfg = &ck.config;
    let agg = ctx.cfg.probe.aggregation;
    let wants_noun = todo
        .iter()
        .any(|(a, _)| matches!(a, Analysis::Phase1 | Analysis::StressOneBack));
    let need_hidden = todo.iter().any(|(a, _)| *a == Analysis::Phase1);
    let t0 = Instant::now();
    let (aligned, skipped) = if wants_noun {
        cells::align_nouns(&ck, &stim.nouns)
    } else {
        (Vec::new(), Vec::new())
    };
    let sweep = wants_noun.then(|| cells::noun_sweep(cfg, &ck, &aligned, agg, need_hidden));
    for (a, input) in todo {
        // The shared noun pass is charged to both noun analyses.
        let t = if matches!(a, Analysis::Phase1 | Analysis::StressOneBack) {
            t0
        } else {
            Instant::now()
        };
        let out: Result<CellOutput> = match a {
            Analysis::Phase1 => match &sweep {
                Some(Ok(s)) => cells::phase1(cfg, s, step, skipped.clone()).map(CellOutput::Phase1),
                Some(Err(e)) => Err(e.clone_msg()),
                None => unreachable!(),
            },
            Analysis::StressOneBack => match &sweep {
                Some(Ok(s)) => cells::one_back(cfg, s, skipped.clone()).map(CellOutput::OneBack),
                Some(Err(e)) => Err(e.clone_msg()),
                None => unreachable!(),
            },
            Analysis::StressPositional => cells::perturbed_attention(cfg, &ck, &stim.positional, agg, |_| "positional")
                .map(CellOutput::StressPositional),
            Analysis::StressPos => {
                cells::perturbed_attention(cfg, &ck, &stim.pos, agg, cells::pos_group).map(CellOutput::StressPos)
            }
            Analysis::Modnoun => cells::modnoun(cfg, &ck, &stim.modnoun).map(CellOutput::Modnoun),
            _ => unreachable!(),
        };
        let rec = ctx.store(&id, Some(step), a, input, t, &out);
        if let Ok(v) = out {
            res.outputs.push((step, v));
        }
        res.computed += 1;
        res.records.push(rec);
    }
    (res, Some(ckpt))
}

impl ProbeError {
    /// Same variant family as a message-only copy; errors are not `Clone`.
    fn clone_msg(&self) -> ProbeError {
        match self {
            ProbeError::Config(m) => ProbeError::Config(m.clone()),
            ProbeError::Network(m) => ProbeError::Network(m.clone()),
            ProbeError::NotFound { what, nearby } => ProbeError::NotFound {
                what: what.clone(),
                nearby: nearby.clone(),
            },
            other => ProbeError::Argument(other.to_string()),
        }
    }
}

fn steps_for(ctx: &Ctx, m: &ModelSpec) -> Result<Vec<u64>> {
    let mut steps = match (&m.repo_id, &ctx.hub, &ctx.cfg.schedule) {
        (Some(repo), Some(hub), s @ Schedule::Named(_)) => hub.resolve_schedule(repo, s)?,
        (_, _, s) => checkpoint_schedule(s)?,
    };
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// Run every configured cell, write tables and the manifest.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let workers = opts.workers.unwrap_or(cfg.workers).max(1);
    parallel::with_workers(workers, || run_inner(cfg, opts))
}

fn run_inner(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| ProbeError::io(&out, e))?;
    for (m, _) in &opts.only {
        if !cfg.models.iter().any(|x| &x.id() == m) {
            return Err(ProbeError::Config(format!("--only names unknown model `{m}`")));
        }
    }
    let hub = if cfg.models.iter().any(|m| m.repo_id.is_some()) {
        Some(HubClient::new(cfg.hub_config())?)
    } else {
        None
    };
    let ctx = Ctx {
        cfg,
        out: out.clone(),
        previous: if opts.resume { RunManifest::load(&out)? } else { None },
        only: &opts.only,
        hub,
    };
    let stim = load_stimuli(cfg)?;
    let mut notes = stim.notes.clone();
    let mut records: Vec<CellRecord> = Vec::new();
    let (mut computed, mut reused) = (0, 0);

    let mut models: Vec<ModelResults> = Vec::new();
    for m in &cfg.models {
        models.push(ModelResults {
            id: m.id(),
            label: m.label.clone(),
            run: m.run_label(),
            steps: steps_for(&ctx, m)?,
            ..Default::default()
        });
    }

    // Stage A: per-step analyses, parallel over (model, step).
    let units: Vec<(usize, u64)> = models
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.steps.iter().map(move |s| (i, *s)))
        .collect();
    let per_step = if STEP_ANALYSES.iter().any(|a| cfg.wants(*a)) {
        parallel::map(&units, |(i, s)| unit_stage_a(&ctx, &stim, &cfg.models[*i], *s))
    } else {
        Vec::new()
    };
    for ((i, s), (unit, digest)) in units.iter().zip(per_step) {
        let r = &mut models[*i];
        if let Some(d) = digest {
            r.ckpt_digest.insert(*s, d);
        }
        computed += unit.computed;
        reused += unit.reused;
        records.extend(unit.records);
        for (step, o) in unit.outputs {
            match o {
                CellOutput::Phase1(v) => drop(r.phase1.insert(step, v)),
                CellOutput::OneBack(v) => drop(r.oneback.insert(step, v)),
                CellOutput::StressPositional(v) => drop(r.positional.insert(step, v)),
                CellOutput::StressPos(v) => drop(r.pos.insert(step, v)),
                CellOutput::Modnoun(v) => drop(r.modnoun.insert(step, v)),
                CellOutput::Ablation(v) => drop(r.ablation.insert(step, v)),
            }
        }
    }

    // Stage B: sweep aggregates that ablation depends on.
    for r in &mut models {
        let final_step = *r.steps.last().expect("validated non-empty schedule");
        if cfg.wants(Analysis::Phase1) {
            let series: Vec<(u64, &Phase1Output)> = r.phase1.iter().map(|(s, o)| (*s, o)).collect();
            let input = sweep_input(
                Analysis::Phase1,
                &r.id,
                &records,
                &[Analysis::Phase1],
                &format!("{:?}", cfg.probe.tracked_layer),
            );
            let rec = sweep_cell(
                &ctx,
                &r.id,
                Analysis::Phase1,
                input,
                &mut computed,
                &mut reused,
                &mut r.phase1_sweep,
                || sweep::phase1_sweep(&series, cfg.probe.tracked_layer, final_step),
            );
            records.push(rec);
            if let Some(p) = &r.phase1_sweep {
                notes.extend(p.notes.iter().map(|n| format!("{}: {n}", r.id)));
            }
        }
        if cfg.wants(Analysis::StressOneBack) {
            let series: Vec<(u64, &OneBackOutput)> = r.oneback.iter().map(|(s, o)| (*s, o)).collect();
            let input = sweep_input(Analysis::StressOneBack, &r.id, &records, &[Analysis::StressOneBack], "");
            let rec = sweep_cell(
                &ctx,
                &r.id,
                Analysis::StressOneBack,
                input,
                &mut computed,
                &mut reused,
                &mut r.oneback_sweep,
                || sweep::oneback_sweep(&series),
            );
            records.push(rec);
        }
        if cfg.wants(Analysis::Composite) {
            let deps = [
                Analysis::Phase1,
                Analysis::StressOneBack,
                Analysis::StressPositional,
                Analysis::StressPos,
            ];
            let input = sweep_input(Analysis::Composite, &r.id, &records, &deps, "");
            let parts = (
                r.phase1_sweep.as_ref(),
                r.oneback.get(&final_step),
                r.positional.get(&final_step),
                r.pos.get(&final_step),
            );
            let rec = match parts {
                (Some(p1), Some(ob), Some(posit), Some(pos)) => sweep_cell(
                    &ctx,
                    &r.id,
                    Analysis::Composite,
                    input,
                    &mut computed,
                    &mut reused,
                    &mut r.composite,
                    || sweep::composite_sweep(final_step, p1, ob, posit, pos),
                ),
                _ => Ctx::blocked(
                    &r.id,
                    None,
                    Analysis::Composite,
                    format!("final-step ({final_step}) inputs incomplete"),
                ),
            };
            records.push(rec);
        }
    }

    // Stage C: ablations, parallel over (model, step).
    if cfg.wants(Analysis::Ablation) {
        let plans: Vec<std::result::Result<AblationPlan, String>> = models
            .iter()
            .zip(&cfg.models)
            .map(|(r, m)| ablation_plan(&ctx, m, r).map_err(|e| e.to_string()))
            .collect();
        let units: Vec<(usize, u64)> = models
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.steps.iter().map(move |s| (i, *s)))
            .collect();
        let done = parallel::map(&units, |(i, s)| {
            let r = &models[*i];
            let m = &cfg.models[*i];
            match &plans[*i] {
                Err(why) => ctx.selected(&r.id, Some(*s)).then(|| {
                    (
                        Ctx::blocked(&r.id, Some(*s), Analysis::Ablation, why.clone()),
                        None,
                        0,
                        0,
                    )
                }),
                Ok(plan) => unit_ablation(&ctx, &stim, m, r, plan, *s),
            }
        });
        for ((i, s), d) in units.iter().zip(done) {
            if let Some((rec, out, c, u)) = d {
                records.push(rec);
                computed += c;
                reused += u;
                if let Some(o) = out {
                    models[*i].ablation.insert(*s, o);
                }
            }
        }
        for r in &mut models {
            let series: Vec<(u64, &AblationOutput)> = r.ablation.iter().map(|(s, o)| (*s, o)).collect();
            let input = sweep_input(Analysis::Ablation, &r.id, &records, &[Analysis::Ablation], "");
            let rec = sweep_cell(
                &ctx,
                &r.id,
                Analysis::Ablation,
                input,
                &mut computed,
                &mut reused,
                &mut r.ablation_sweep,
                || sweep::ablation_sweep(&series),
            );
            if let Some(a) = &r.ablation_sweep {
                notes.extend(a.notes.iter().map(|n| format!("{}: {n}", r.id)));
            }
            records.push(rec);
        }
    }

    // Stage D: modifier-noun coupling, pooled over runs of a label.
    let mut couplings: Vec<(String, ModnounSweep)> = Vec::new();
    if cfg.wants(Analysis::Modnoun) && cfg.wants(Analysis::Phase1) {
        let mut labels: Vec<String> = Vec::new();
        for r in &models {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
        for label in labels {
            let runs: Vec<(String, &Phase1Sweep, Vec<(u64, &ModNounOutput)>)> = models
                .iter()
                .filter(|r| r.label == label)
                .filter_map(|r| {
                    let p1 = r.phase1_sweep.as_ref()?;
                    Some((r.run.clone(), p1, r.modnoun.iter().map(|(s, o)| (*s, o)).collect()))
                })
                .collect();
            let ids: Vec<String> = models
                .iter()
                .filter(|r| r.label == label)
                .map(|r| r.id.clone())
                .collect();
            let mut input_parts = Vec::new();
            for id in &ids {
                input_parts.push(sweep_input(
                    Analysis::Modnoun,
                    id,
                    &records,
                    &[Analysis::Modnoun, Analysis::Phase1],
                    "",
                ));
            }
            let input = combine(&input_parts.iter().map(|s| ("run", s.as_str())).collect::<Vec<_>>());
            let mut slot: Option<ModnounSweep> = None;
            let rec = sweep_cell(
                &ctx,
                &label,
                Analysis::Modnoun,
                input,
                &mut computed,
                &mut reused,
                &mut slot,
                || sweep::modnoun_sweep(&label, &runs),
            );
            records.push(rec);
            if let Some(s) = slot {
                couplings.push((label, s));
            }
        }
    }

    let tracked_layers = models
        .iter()
        .filter_map(|r| r.phase1_sweep.as_ref().map(|p| (r.id.clone(), p.tracked_layer)))
        .collect();
    let model_order: Vec<String> = cfg.models.iter().map(ModelSpec::id).collect();
    let label_order: Vec<String> = cfg.models.iter().map(|m| m.label.clone()).collect();
    records.sort_by_key(|c| {
        let mi = model_order
            .iter()
            .position(|m| *m == c.model)
            .or_else(|| {
                label_order
                    .iter()
                    .position(|l| *l == c.model)
                    .map(|p| p + model_order.len())
            })
            .unwrap_or(usize::MAX);
        (mi, c.step.is_none(), c.step, c.analysis)
    });
    let tables = tables::write_all(&out, cfg, &models, &couplings)?;
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config: cfg.clone(),
        cells: records,
        tables,
        tracked_layers,
        notes,
    };
    manifest.save(&out)?;
    Ok(RunSummary {
        manifest,
        computed,
        reused,
    })
}

fn sweep_input(a: Analysis, model: &str, records: &[CellRecord], deps: &[Analysis], extra: &str) -> String {
    let mut parts: Vec<String> = vec![TOOL_VERSION.into(), a.as_str().into(), extra.into()];
    for r in records
        .iter()
        .filter(|r| r.model == model && deps.contains(&r.analysis))
    {
        parts.push(format!(
            "{:?}/{}/{:?}/{}",
            r.step,
            r.analysis,
            r.status,
            r.output_digest.as_deref().unwrap_or("")
        ));
    }
    combine(&parts.iter().map(|p| ("", p.as_str())).collect::<Vec<_>>())
}

#[allow(clippy::too_many_arguments)]
fn sweep_cell<T: Serialize + DeserializeOwned>(
    ctx: &Ctx,
    model: &str,
    a: Analysis,
    input: String,
    computed: &mut usize,
    reused: &mut usize,
    slot: &mut Option<T>,
    f: impl FnOnce() -> Result<T>,
) -> CellRecord {
    if let Cell::Reused(rec, v) = ctx.lookup::<T>(model, None, a, &input) {
        *slot = Some(v);
        *reused += 1;
        return rec;
    }
    let t = Instant::now();
    let out = f();
    let rec = ctx.store(model, None, a, input, t, &out);
    *slot = out.ok();
    *computed += 1;
    rec
}

struct AblationPlan {
    tracked_layer: usize,
    specs: Vec<AblationSpec>,
    /// `(step, dir, digest)` of the copy source.
    source: Option<(u64, PathBuf, String)>,
    specs_digest: String,
}

fn ablation_plan(ctx: &Ctx, m: &ModelSpec, r: &ModelResults) -> Result<AblationPlan> {
    let p1 = r
        .phase1_sweep
        .as_ref()
        .ok_or_else(|| ProbeError::Argument("phase1 sweep unavailable; tracked layer unknown".into()))?;
    let acfg = &ctx.cfg.ablation;
    let family = acfg.preset.as_deref().unwrap_or(m.family());
    let composite: Option<Vec<_>> = r.composite.as_ref().map(|c| c.rows.iter().map(|e| e.index).collect());
    let sets = default_head_sets(family, composite.as_deref(), acfg.user_sets()?.as_ref())?;
    let wants_copy = acfg.kinds.iter().any(|k| k == "copy");
    let source = if wants_copy {
        let preferred = acfg.copy_source_step;
        let found = ctx.checkpoint_dir(m, preferred).map(|d| (preferred, d));
        let (step, dir) = match found {
            Ok(v) => v,
            Err(e) => {
                let earliest = r.steps[0];
                log::warn!(
                    "{}: copy source step {preferred} unavailable ({e}); using step {earliest}",
                    r.id
                );
                (earliest, ctx.checkpoint_dir(m, earliest)?)
            }
        };
        let digest = checkpoint_digest(&dir)?;
        Some((step, dir, digest))
    } else {
        None
    };
    let copy_step = source.as_ref().map_or(acfg.copy_source_step, |s| s.0);
    let mut specs = Vec::new();
    for kind in acfg.kinds(copy_step)? {
        specs.extend(specs_for(&sets, kind));
    }
    Ok(AblationPlan {
        tracked_layer: p1.tracked_layer,
        specs_digest: sha256_hex(&serde_json::to_vec(&specs)?),
        specs,
        source,
    })
}

fn unit_ablation(
    ctx: &Ctx,
    stim: &Stimuli,
    m: &ModelSpec,
    r: &ModelResults,
    plan: &AblationPlan,
    step: u64,
) -> Option<(CellRecord, Option<AblationOutput>, usize, usize)> {
    let a = Analysis::Ablation;
    if !ctx.selected(&r.id, Some(step)) {
        return match ctx.reusable::<CellOutput>(&r.id, Some(step), a, None) {
            Some((rec, CellOutput::Ablation(o))) => Some((rec, Some(o), 0, 1)),
            _ => None,
        };
    }
    let phase1_digest = ctx_digest_of(ctx, r, step);
    let (Some(p1), Some(ckpt), Some(p1d)) = (r.phase1.get(&step), r.ckpt_digest.get(&step), phase1_digest) else {
        return Some((
            Ctx::blocked(&r.id, Some(step), a, "phase1 result missing for this step".into()),
            None,
            0,
            0,
        ));
    };
    let input = combine(&[
        ("tool", TOOL_VERSION),
        ("analysis", a.as_str()),
        ("checkpoint", ckpt),
        ("rawc", &stim.rawc_digest),
        ("phase1", &p1d),
        ("layer", &plan.tracked_layer.to_string()),
        ("specs", &plan.specs_digest),
        ("source", plan.source.as_ref().map_or("", |s| s.2.as_str())),
    ]);
    if let Cell::Reused(rec, v) = ctx.lookup::<CellOutput>(&r.id, Some(step), a, &input) {
        if let CellOutput::Ablation(o) = v {
            return Some((rec, Some(o), 0, 1));
        }
    }
    let t = Instant::now();
    let out = (|| -> Result<AblationOutput> {
        let ck = load_checkpoint(&ctx.checkpoint_dir(m, step)?)?;
        let source: Option<(u64, Checkpoint)> = match &plan.source {
            Some((s, dir, _)) => Some((*s, load_checkpoint(dir)?)),
            None => None,
        };
        let (pairs, _) = cells::align_nouns(&ck, &stim.nouns);
        let intact: Vec<f64> = p1.layer_scores.iter().map(|l| l.r2).collect();
        let specs: Vec<AblationSpec> = plan
            .specs
            .iter()
            .filter(|s| !matches!(s.kind, AblationKind::CopyFromStep(_)) || source.is_some())
            .cloned()
            .collect();
        cells::ablation(
            &ck.config,
            &ck,
            source.as_ref().map(|(s, c)| (*s, c)),
            &pairs,
            &intact,
            &specs,
            plan.tracked_layer,
            step,
        )
    })();
    let wrapped = out.map(CellOutput::Ablation);
    let rec = ctx.store(&r.id, Some(step), a, input, t, &wrapped);
    let out = match wrapped {
        Ok(CellOutput::Ablation(o)) => Some(o),
        _ => None,
    };
    Some((rec, out, 1, 0))
}

/// Digest of the phase1 cell output at `step`, from its cell file.
fn ctx_digest_of(ctx: &Ctx, r: &ModelResults, step: u64) -> Option<String> {
    let path = ctx.out.join(cell_path(&r.id, Some(step), Analysis::Phase1));
    sha256_file(&path).ok()
}
