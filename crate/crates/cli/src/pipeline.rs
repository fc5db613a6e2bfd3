//! End-to-end pipeline over a work directory. Every stage leaves its
//! artifacts on disk and a `.done` marker, and the training stages save
//! their state after each epoch, so a rerun skips finished work and
//! resumes an interrupted stage from its last completed epoch.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;
use vexkit::embed::{
    embed_all, load_embeddings, save_embeddings, score_set, score_trials, scores_to_text, EmbedError, Protocol,
    UtteranceEmbeddings,
};
use vexkit::frontend::{normalize, read_cache, read_wav, reflect_pad_frames, write_cache, SpectrogramPlan};
use vexkit::manifest::{load_manifest, Manifest, Split};
use vexkit::metrics::MetricsReport;
use vexkit::rng::substream;
use vexkit::train::{
    finetune_contrastive, pretrain_identification, split_validation, Control, ExampleSet, FeatureBank, Outcome,
    Stage, TrainError, TrainState,
};
use vexkit::trials::{gen_hard_trials, gen_random_trials, load_trial_list, save_trial_list, TrialError, TrialList};
use vexkit::trunk::{build_trunk, HeadKind, Trunk};
use vexkit_ndgrad::{Checkpoint, ParamSet};

use crate::config::RunConfig;

/// Process exit status class of a failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Divergence,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Config => 2,
            Self::Data => 3,
            Self::Divergence => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &'static str, kind: FailureKind, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, StageError>;

fn data<E: fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> StageError {
    move |e| StageError::new(stage, FailureKind::Data, e)
}

fn train_err(stage: &'static str) -> impl FnOnce(TrainError) -> StageError {
    move |e| {
        let kind = match e {
            TrainError::Divergence { .. } => FailureKind::Divergence,
            TrainError::Config(_) | TrainError::StageOrder { .. } | TrainError::Infeasible(_) => FailureKind::Config,
            _ => FailureKind::Data,
        };
        StageError::new(stage, kind, e)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOptions {
    /// Rayon threads for preprocessing and embedding; 0 keeps the
    /// ambient pool. Training is always single-threaded.
    pub threads: usize,
    /// Stop once the given stage has completed this many epochs.
    pub halt_after: Option<(Stage, usize)>,
}

/// Work-directory layout.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn finetune(&self) -> PathBuf {
        self.root.join("finetune")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.txt")
    }
    pub fn trials(&self) -> PathBuf {
        self.root.join("trials.txt")
    }
    pub fn hard_trials(&self) -> PathBuf {
        self.root.join("trials_hard.txt")
    }
    pub fn scores(&self, list: &str, p: Protocol) -> PathBuf {
        match list {
            "random" => self.root.join(format!("scores_p{p}.txt")),
            other => self.root.join(format!("scores_{other}_p{p}.txt")),
        }
    }
    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("metrics.log")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
}

fn io(stage: &'static str) -> impl FnOnce(std::io::Error) -> StageError {
    data(stage)
}

fn done(dir: &Path) -> bool {
    dir.join(".done").exists()
}

fn mark_done(dir: &Path, stage: &'static str) -> Result<()> {
    std::fs::write(dir.join(".done"), b"").map_err(io(stage))
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

pub fn load_run_manifest(cfg: &RunConfig) -> Result<Manifest> {
    load_manifest(&cfg.manifest).map_err(data("manifest"))
}

/// Computes normalized spectrograms of every utterance into the feature
/// cache (`features/NNNNNN.vxsp` plus `features/index.txt`).
pub fn preprocess(cfg: &RunConfig, m: &Manifest, threads: usize) -> Result<()> {
    const STAGE: &str = "preprocess";
    let wd = Workdir::new(&cfg.workdir);
    let dir = wd.features();
    if done(&dir) {
        return Ok(());
    }
    std::fs::create_dir_all(&dir).map_err(io(STAGE))?;
    let base = cfg.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let plan = SpectrogramPlan::default();
    let utts = m.utterances();
    with_threads(threads, || {
        utts.par_iter().enumerate().try_for_each(|(i, u)| -> Result<()> {
            let path = if u.audio_path.is_absolute() {
                u.audio_path.clone()
            } else {
                base.join(&u.audio_path)
            };
            let w = read_wav(&path).map_err(|e| StageError::new(STAGE, FailureKind::Data, format!("{}: {e}", path.display())))?;
            let s = reflect_pad_frames(&plan.compute(&w).map_err(data(STAGE))?, cfg.pad_frames);
            let s = normalize(&s).map_err(data(STAGE))?;
            let f = File::create(dir.join(format!("{i:06}.vxsp"))).map_err(io(STAGE))?;
            write_cache(BufWriter::new(f), &s).map_err(data(STAGE))
        })
    })?;
    let index: String = utts.iter().enumerate().map(|(i, u)| format!("{i}\t{}\n", u.utterance_id)).collect();
    std::fs::write(dir.join("index.txt"), index).map_err(io(STAGE))?;
    mark_done(&dir, STAGE)
}

/// Loads the feature cache into memory, restricted to `keep` if given.
pub fn load_features(cfg: &RunConfig, keep: Option<&HashSet<String>>) -> Result<FeatureBank> {
    const STAGE: &str = "features";
    let dir = Workdir::new(&cfg.workdir).features();
    if !done(&dir) {
        return Err(StageError::new(STAGE, FailureKind::Data, "feature cache missing; run preprocess first"));
    }
    let index = std::fs::read_to_string(dir.join("index.txt")).map_err(io(STAGE))?;
    let mut bank = FeatureBank::new();
    for line in index.lines() {
        let (i, id) = line
            .split_once('\t')
            .ok_or_else(|| StageError::new(STAGE, FailureKind::Data, format!("bad index line `{line}`")))?;
        if keep.is_some_and(|k| !k.contains(id)) {
            continue;
        }
        let f = File::open(dir.join(format!("{i:0>6}.vxsp"))).map_err(io(STAGE))?;
        let mut s = read_cache(BufReader::new(f)).map_err(data(STAGE))?;
        s.normalized = true;
        bank.insert(id, &s);
    }
    Ok(bank)
}

/// Train / validation split shared by every stage.
pub fn examples(cfg: &RunConfig, m: &Manifest) -> Result<(ExampleSet, ExampleSet)> {
    split_validation(m, &mut substream(cfg.seed, "split", 0)).map_err(train_err("split"))
}

/// Utterances scored at evaluation: held-out validation videos plus every
/// test-split utterance.
pub fn eval_manifest(cfg: &RunConfig, m: &Manifest) -> Result<Manifest> {
    let (_, val) = examples(cfg, m)?;
    let test = m.ids_in_split(Split::Test);
    let ids: HashSet<String> = val.ids().into_iter().collect();
    Ok(m.retain_utterances(|u| ids.contains(&u.utterance_id) || test.contains(&u.speaker_id)))
}

pub fn initial_model(cfg: &RunConfig) -> Result<(Trunk, ParamSet)> {
    let (trunk, mut params, _) = build_trunk(&cfg.trunk, &mut substream(cfg.seed, "init", 0))
        .map_err(|e| StageError::new("init", FailureKind::Config, e))?;
    params.round_to_f32();
    Ok((trunk, params))
}

fn embedding_model(cfg: &RunConfig, trunk: &Trunk, mut params: ParamSet) -> Result<(Trunk, ParamSet)> {
    let mut t = trunk.clone();
    t.swap_head(&mut params, HeadKind::Classification, HeadKind::Embedding, &mut substream(cfg.seed, "init", 1))
        .map_err(|e| StageError::new("finetune", FailureKind::Config, e))?;
    params.round_to_f32();
    Ok((t, params))
}

fn read_history(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("state.txt"))
        .map(|t| {
            t.lines()
                .filter_map(|l| l.strip_prefix("history="))
                .map(|l| format!("{l}\n"))
                .collect()
        })
        .unwrap_or_default()
}

/// Runs (or resumes) one training stage; `Ok(None)` means halted.
fn run_stage(
    stage_name: &'static str,
    dir: &Path,
    trunk: &Trunk,
    template: ParamSet,
    stage: Stage,
    halt_after: Option<(Stage, usize)>,
    log_prefix: &str,
    wd: &Workdir,
    mut run: impl FnMut(&mut TrainState, &mut dyn FnMut(&TrainState) -> std::result::Result<Control, TrainError>) -> std::result::Result<Outcome, TrainError>,
) -> Result<Option<ParamSet>> {
    let fp = trunk.fingerprint();
    let final_path = dir.join("final.ckpt");
    if done(dir) {
        let mut p = template;
        Checkpoint::load(&final_path)
            .and_then(|c| c.apply_to(&mut p, fp))
            .map_err(data(stage_name))?;
        return Ok(Some(p));
    }
    std::fs::create_dir_all(dir).map_err(io(stage_name))?;
    let mut state = if dir.join("state.txt").exists() {
        TrainState::load(dir, &template, fp).map_err(train_err(stage_name))?
    } else {
        TrainState::new(stage, template)
    };
    let mut on_epoch = |s: &TrainState| -> std::result::Result<Control, TrainError> {
        s.save(dir, fp)?;
        std::fs::write(wd.metrics_log(), format!("{log_prefix}{}", s.metrics_log()))?;
        if let Some(last) = s.history.last() {
            eprintln!("[{stage_name}] epoch {} loss {:.4} val {:.4} lr {:.3e}", last.epoch, last.loss, last.val_metric, last.lr);
        }
        Ok(match halt_after {
            Some((st, n)) if st == stage && s.epoch >= n => Control::Halt,
            _ => Control::Continue,
        })
    };
    match run(&mut state, &mut on_epoch).map_err(train_err(stage_name))? {
        Outcome::Halted => Ok(None),
        Outcome::Completed => {
            state.save(dir, fp).map_err(train_err(stage_name))?;
            Checkpoint::from_params(state.final_params(), fp)
                .save(&final_path)
                .map_err(data(stage_name))?;
            std::fs::write(wd.metrics_log(), format!("{log_prefix}{}", state.metrics_log())).map_err(io(stage_name))?;
            mark_done(dir, stage_name)?;
            Ok(Some(state.final_params().clone()))
        }
    }
}

/// Softmax pre-training; returns `None` when halted.
pub fn pretrain(cfg: &RunConfig, m: &Manifest, bank: &FeatureBank, opts: &PipelineOptions) -> Result<Option<(Trunk, ParamSet)>> {
    let wd = Workdir::new(&cfg.workdir);
    let (trunk, params) = initial_model(cfg)?;
    let (train, val) = examples(cfg, m)?;
    if train.speakers() > cfg.trunk.num_classes {
        return Err(StageError::new(
            "pretrain",
            FailureKind::Config,
            format!("{} training speakers exceed trunk.num_classes {}", train.speakers(), cfg.trunk.num_classes),
        ));
    }
    let out = run_stage("pretrain", &wd.pretrain(), &trunk, params, Stage::Identification, opts.halt_after, "", &wd, |state, hook| {
        pretrain_identification(&trunk, state, bank, &train, &val, &cfg.train, hook)
    })?;
    Ok(out.map(|p| (trunk, p)))
}

/// Contrastive fine-tuning from the pre-trained weights.
pub fn finetune(
    cfg: &RunConfig,
    m: &Manifest,
    bank: &FeatureBank,
    pretrained: (Trunk, ParamSet),
    opts: &PipelineOptions,
) -> Result<Option<(Trunk, ParamSet)>> {
    let wd = Workdir::new(&cfg.workdir);
    let (trunk, params) = embedding_model(cfg, &pretrained.0, pretrained.1)?;
    let (train, val) = examples(cfg, m)?;
    let prefix = read_history(&wd.pretrain());
    let out = run_stage("finetune", &wd.finetune(), &trunk, params, Stage::Contrastive, opts.halt_after, &prefix, &wd, |state, hook| {
        finetune_contrastive(&trunk, state, bank, &train, &val, &cfg.train, hook)
    })?;
    Ok(out.map(|p| (trunk, p)))
}

/// Loads the finished fine-tuned model.
pub fn load_embedding_model(cfg: &RunConfig) -> Result<(Trunk, ParamSet)> {
    let wd = Workdir::new(&cfg.workdir);
    let (trunk, params) = initial_model(cfg)?;
    let (trunk, mut params) = embedding_model(cfg, &trunk, params)?;
    let path = wd.finetune().join("final.ckpt");
    Checkpoint::load(&path)
        .and_then(|c| c.apply_to(&mut params, trunk.fingerprint()))
        .map_err(|e| StageError::new("embed", FailureKind::Data, format!("{}: {e}", path.display())))?;
    Ok((trunk, params))
}

/// Embeds every evaluation utterance into `embeddings.txt`.
pub fn embed_stage(cfg: &RunConfig, eval: &Manifest, model: &(Trunk, ParamSet), threads: usize) -> Result<Vec<(String, UtteranceEmbeddings)>> {
    const STAGE: &str = "embed";
    let wd = Workdir::new(&cfg.workdir);
    if wd.embeddings().exists() {
        return load_embeddings(wd.embeddings()).map_err(data(STAGE));
    }
    let ids: Vec<String> = eval.utterances().iter().map(|u| u.utterance_id.clone()).collect();
    let keep: HashSet<String> = ids.iter().cloned().collect();
    let bank = load_features(cfg, Some(&keep))?;
    let embs = embed_all(&model.0, &model.1, &ids, |id| bank.get(id).map_err(|e| EmbedError::Features(e.to_string())), threads)
        .map_err(data(STAGE))?;
    let items: Vec<(String, UtteranceEmbeddings)> = ids.into_iter().zip(embs).collect();
    let tmp = wd.root.join("embeddings.txt.tmp");
    save_embeddings(&items, &tmp).map_err(data(STAGE))?;
    std::fs::rename(&tmp, wd.embeddings()).map_err(io(STAGE))?;
    Ok(items)
}

fn trial_err(e: TrialError) -> StageError {
    StageError::new("gen-trials", FailureKind::Data, e)
}

/// Generates `trials.txt` (random pairs) and, when the evaluation set has
/// eligible groups, `trials_hard.txt`.
pub fn trials_stage(cfg: &RunConfig, eval: &Manifest) -> Result<Vec<TrialList>> {
    let wd = Workdir::new(&cfg.workdir);
    let mut lists = Vec::new();
    if !wd.trials().exists() {
        let l = gen_random_trials(eval, cfg.eval.trials, cfg.seed, &mut substream(cfg.seed, "trials", 0)).map_err(trial_err)?;
        save_trial_list(&l, wd.trials()).map_err(trial_err)?;
    }
    let mut l = load_trial_list(wd.trials()).map_err(trial_err)?;
    l.name = "random".into();
    lists.push(l);
    if cfg.eval.hard_trials > 0 {
        if !wd.hard_trials().exists() {
            match gen_hard_trials(eval, cfg.eval.hard_trials, cfg.eval.min_group, cfg.seed, &mut substream(cfg.seed, "trials", 1)) {
                Ok(l) => save_trial_list(&l, wd.hard_trials()).map_err(trial_err)?,
                Err(TrialError::NoEligibleGroup { .. }) => {
                    eprintln!("[gen-trials] no eligible nationality/gender group; skipping hard list");
                    return Ok(lists);
                }
                Err(e) => return Err(trial_err(e)),
            }
        }
        let mut l = load_trial_list(wd.hard_trials()).map_err(trial_err)?;
        l.name = "hard".into();
        lists.push(l);
    }
    Ok(lists)
}

/// Scores every list under every protocol and writes the score files;
/// returns `(list name, protocol, report)` triples.
pub fn score_and_evaluate(
    cfg: &RunConfig,
    lists: &[TrialList],
    embeddings: &[(String, UtteranceEmbeddings)],
) -> Result<Vec<(String, Protocol, MetricsReport)>> {
    const STAGE: &str = "score";
    let wd = Workdir::new(&cfg.workdir);
    let lookup: HashMap<&str, &UtteranceEmbeddings> = embeddings.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let mut out = Vec::new();
    for list in lists {
        for p in Protocol::ALL {
            let scores = score_trials(list, |id| lookup.get(id).copied(), p).map_err(data(STAGE))?;
            std::fs::write(wd.scores(&list.name, p), scores_to_text(&scores)).map_err(io(STAGE))?;
            let set = score_set(&scores).map_err(data("evaluate"))?;
            let label = format!("{} p{p}", list.name);
            let r = MetricsReport::compute(label, &set, cfg.eval.cost).map_err(data("evaluate"))?;
            out.push((list.name.clone(), p, r));
        }
    }
    Ok(out)
}

pub fn report_text(cfg: &RunConfig, pretrain_log: &str, finetune_log: &str, reports: &[(String, Protocol, MetricsReport)]) -> String {
    let mut out = String::from("vexkit report\n");
    out.push_str(&format!("seed={} trunk={} width={}\n", cfg.seed, cfg.trunk.family, cfg.trunk.width));
    let best = |log: &str, higher: bool| {
        log.lines()
            .filter_map(|l| l.split_whitespace().nth(3)?.parse::<f64>().ok())
            .filter(|v| !v.is_nan())
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| if higher { a.max(v) } else { a.min(v) })))
    };
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    out.push_str(&format!(
        "pretrain epochs={} best_val_top1={}\n",
        pretrain_log.lines().count(),
        fmt_opt(best(pretrain_log, true))
    ));
    out.push_str(&format!(
        "finetune epochs={} best_val_eer={}\n",
        finetune_log.lines().count(),
        fmt_opt(best(finetune_log, false))
    ));
    for (_, _, r) in reports {
        out.push('\n');
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Result of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub enum PipelineOutcome {
    Halted,
    Finished { report: String, metrics: Vec<(String, Protocol, MetricsReport)> },
}

/// preprocess, pretrain, finetune, embed, trials, score, evaluate.
pub fn run_pipeline(cfg: &RunConfig, opts: &PipelineOptions) -> Result<PipelineOutcome> {
    let wd = Workdir::new(&cfg.workdir);
    std::fs::create_dir_all(&wd.root).map_err(io("pipeline"))?;
    let snapshot = cfg.to_text();
    match std::fs::read_to_string(wd.snapshot()) {
        Ok(old) if old != snapshot => {
            return Err(StageError::new(
                "pipeline",
                FailureKind::Config,
                format!("{} holds a different config; use a fresh workdir", wd.snapshot().display()),
            ))
        }
        Ok(_) => {}
        Err(_) => std::fs::write(wd.snapshot(), &snapshot).map_err(io("pipeline"))?,
    }
    let m = load_run_manifest(cfg)?;
    preprocess(cfg, &m, opts.threads)?;
    let (train, val) = examples(cfg, &m)?;
    let needed: HashSet<String> = train.ids().into_iter().chain(val.ids()).collect();
    let model = {
        let bank = load_features(cfg, Some(&needed))?;
        let Some(pre) = pretrain(cfg, &m, &bank, opts)? else {
            return Ok(PipelineOutcome::Halted);
        };
        let Some(model) = finetune(cfg, &m, &bank, pre, opts)? else {
            return Ok(PipelineOutcome::Halted);
        };
        model
    };
    let eval = eval_manifest(cfg, &m)?;
    let embeddings = embed_stage(cfg, &eval, &model, opts.threads)?;
    let lists = trials_stage(cfg, &eval)?;
    let metrics = score_and_evaluate(cfg, &lists, &embeddings)?;
    let report = report_text(cfg, &read_history(&wd.pretrain()), &read_history(&wd.finetune()), &metrics);
    std::fs::write(wd.report(), &report).map_err(io("evaluate"))?;
    Ok(PipelineOutcome::Finished { report, metrics })
}
