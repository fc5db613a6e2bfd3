//! Two-stage training: softmax identification pre-training with a
//! held-out-video validation split, then contrastive fine-tuning on a mix
//! of random pairs and offline-mined hard negatives.
//!
//! All randomness comes from named substreams of one seed, keyed by epoch,
//! so an interrupted run resumed from its last epoch state continues with
//! exactly the draws the uninterrupted run would have made.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;
use vexkit_ndgrad::{Checkpoint, NdError, ParamSet, Sgd, SgdConfig, Tape};

use crate::embed::{euclidean, l2_normalized};
use crate::frontend::{Spectrogram, CROP_FRAMES};
use crate::manifest::{Manifest, Split};
use crate::metrics::{eer, ScoreSet};
use crate::rng::substream;
use crate::trunk::{apply_bn_updates, batch_tensor, HeadKind, Mode, Trunk, TrunkError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("manifest has no development utterances")]
    EmptyManifest,
    #[error("infeasible pair request: {0}")]
    Infeasible(String),
    #[error("no candidate pairs to mine")]
    EmptyCandidates,
    #[error("mining candidate {utt_a} / {utt_b} is a positive pair")]
    PositiveCandidate { utt_a: String, utt_b: String },
    #[error("loss became non-finite ({loss}) in {stage} epoch {epoch}")]
    Divergence { stage: Stage, epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {found} cannot run here, expected {expected}")]
    StageOrder { expected: Stage, found: Stage },
    #[error("no features for utterance `{0}`")]
    MissingFeatures(String),
    #[error("bad training state: {0}")]
    State(String),
    #[error(transparent)]
    Trunk(#[from] TrunkError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Identification,
    Contrastive,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identification => "identification",
            Self::Contrastive => "contrastive",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identification" => Ok(Self::Identification),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain: SgdConfig,
    /// Fine-tuning optimizer; `batch_size` counts pairs.
    pub finetune: SgdConfig,
    pub patience: usize,
    pub margin: f64,
    pub pos_fraction: f64,
    pub keep_fraction: f64,
    /// Share of each fine-tuning batch taken from the mined hard negatives.
    pub hard_mix: f64,
    pub pairs_per_epoch: usize,
    /// Candidate pool size as a multiple of the number of hard pairs needed.
    pub pool_factor: usize,
    pub crop_frames: usize,
    pub f32_storage: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let pretrain = SgdConfig::default();
        let finetune = SgdConfig {
            lr_initial: pretrain.lr_initial * 0.1,
            lr_final: pretrain.lr_final * 0.1,
            ..pretrain.clone()
        };
        Self {
            pretrain,
            finetune,
            patience: 3,
            margin: 0.5,
            pos_fraction: 0.5,
            keep_fraction: 0.01,
            hard_mix: 0.5,
            pairs_per_epoch: 6400,
            pool_factor: 100,
            crop_frames: CROP_FRAMES,
            f32_storage: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.pretrain.validate().map_err(|e| TrainError::Config(format!("pretrain: {e}")))?;
        self.finetune.validate().map_err(|e| TrainError::Config(format!("finetune: {e}")))?;
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be nonnegative", self.margin));
        }
        for (name, v) in [("pos_fraction", self.pos_fraction), ("hard_mix", self.hard_mix)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("keep_fraction {} outside (0, 1]", self.keep_fraction));
        }
        if self.patience == 0 || self.pairs_per_epoch == 0 || self.pool_factor == 0 || self.crop_frames == 0 {
            return bad("patience, pairs_per_epoch, pool_factor and crop_frames must be positive".into());
        }
        Ok(())
    }

    /// Hard pairs per fine-tuning batch.
    pub fn hard_per_batch(&self) -> usize {
        (self.finetune.batch_size as f64 * self.hard_mix + 1e-9).floor() as usize
    }
}

/// One utterance's training view: id, class label and video.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utterance_id: String,
    pub speaker_id: String,
    pub video_id: String,
    pub label: usize,
}

/// Utterances grouped for sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
    by_speaker: Vec<Vec<usize>>,
}

impl ExampleSet {
    pub fn new(examples: Vec<Example>) -> Self {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            groups.entry(&e.speaker_id).or_default().push(i);
        }
        let by_speaker = groups.into_values().collect();
        Self { examples, by_speaker }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn speakers(&self) -> usize {
        self.by_speaker.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.utterance_id.clone()).collect()
    }
}

/// Class index of every development speaker, in sorted id order.
pub fn class_labels(m: &Manifest) -> BTreeMap<String, usize> {
    m.ids_in_split(Split::Dev)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect()
}

/// Holds out every utterance of one randomly chosen video for each
/// development speaker that has at least two videos.
pub fn split_validation<R: Rng + ?Sized>(m: &Manifest, rng: &mut R) -> Result<(ExampleSet, ExampleSet)> {
    let labels = class_labels(m);
    let mut videos: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let dev: Vec<_> = m
        .utterances()
        .iter()
        .filter(|u| labels.contains_key(&u.speaker_id))
        .collect();
    if dev.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    for u in &dev {
        videos.entry(&u.speaker_id).or_default().insert(&u.video_id);
    }
    let held_out: HashMap<&str, &str> = videos
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(s, v)| {
            let v: Vec<&str> = v.iter().copied().collect();
            (*s, v[rng.gen_range(0..v.len())])
        })
        .collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for u in dev {
        let e = Example {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            video_id: u.video_id.clone(),
            label: labels[&u.speaker_id],
        };
        if held_out.get(u.speaker_id.as_str()) == Some(&u.video_id.as_str()) {
            val.push(e);
        } else {
            train.push(e);
        }
    }
    Ok((ExampleSet::new(train), ExampleSet::new(val)))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub utt_a: String,
    pub utt_b: String,
    pub positive: bool,
    pub mined_hard: bool,
}

/// `n_pairs` random pairs, `floor(n_pairs * pos_fraction)` of them positive,
/// in shuffled order.
pub fn sample_pairs<R: Rng + ?Sized>(set: &ExampleSet, n_pairs: usize, pos_fraction: f64, rng: &mut R) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&pos_fraction) {
        return Err(TrainError::Infeasible(format!("pos_fraction {pos_fraction} outside [0, 1]")));
    }
    let n_pos = (n_pairs as f64 * pos_fraction + 1e-9).floor() as usize;
    let n_neg = n_pairs - n_pos;
    let multi: Vec<&Vec<usize>> = set.by_speaker.iter().filter(|g| g.len() >= 2).collect();
    if n_pos > 0 && multi.is_empty() {
        return Err(TrainError::Infeasible("positive pairs need a speaker with 2 utterances".into()));
    }
    if n_neg > 0 && set.speakers() < 2 {
        return Err(TrainError::Infeasible("negative pairs need 2 speakers".into()));
    }
    let id = |i: usize| set.examples[i].utterance_id.clone();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pos {
        let g = multi[rng.gen_range(0..multi.len())];
        let picked = rand::seq::index::sample(rng, g.len(), 2);
        pairs.push(PairSample {
            utt_a: id(g[picked.index(0)]),
            utt_b: id(g[picked.index(1)]),
            positive: true,
            mined_hard: false,
        });
    }
    for _ in 0..n_neg {
        let s = rand::seq::index::sample(rng, set.speakers(), 2);
        let (ga, gb) = (&set.by_speaker[s.index(0)], &set.by_speaker[s.index(1)]);
        pairs.push(PairSample {
            utt_a: id(ga[rng.gen_range(0..ga.len())]),
            utt_b: id(gb[rng.gen_range(0..gb.len())]),
            positive: false,
            mined_hard: false,
        });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Number of pairs kept from `n` candidates.
pub fn mined_count(n: usize, keep_fraction: f64) -> usize {
    ((n as f64 * keep_fraction + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Keeps the `keep_fraction` of negative candidates with the smallest
/// embedding distance, ties broken by `(utt_a, utt_b)`.
pub fn mine_hard_negatives(candidates: &[PairSample], distances: &[f64], keep_fraction: f64) -> Result<Vec<PairSample>> {
    if candidates.is_empty() {
        return Err(TrainError::EmptyCandidates);
    }
    if candidates.len() != distances.len() {
        return Err(TrainError::Config(format!(
            "{} candidates but {} distances",
            candidates.len(),
            distances.len()
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(TrainError::Config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    if let Some(p) = candidates.iter().find(|p| p.positive) {
        return Err(TrainError::PositiveCandidate {
            utt_a: p.utt_a.clone(),
            utt_b: p.utt_b.clone(),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        distances[i]
            .total_cmp(&distances[j])
            .then_with(|| candidates[i].utt_a.cmp(&candidates[j].utt_a))
            .then_with(|| candidates[i].utt_b.cmp(&candidates[j].utt_b))
    });
    Ok(order[..mined_count(candidates.len(), keep_fraction)]
        .iter()
        .map(|&i| PairSample {
            mined_hard: true,
            ..candidates[i].clone()
        })
        .collect())
}

/// Normalized utterance features held in memory as `f32`.
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    index: HashMap<String, usize>,
    data: Vec<Vec<f32>>,
    frames: Vec<usize>,
}

impl FeatureBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, s: &Spectrogram) {
        let id = id.into();
        let values: Vec<f32> = s.values().iter().map(|&v| v as f32).collect();
        match self.index.get(&id) {
            Some(&i) => {
                self.data[i] = values;
                self.frames[i] = s.frames();
            }
            None => {
                self.index.insert(id, self.data.len());
                self.data.push(values);
                self.frames.push(s.frames());
            }
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn slot(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| TrainError::MissingFeatures(id.to_string()))
    }

    pub fn frames(&self, id: &str) -> Result<usize> {
        Ok(self.frames[self.slot(id)?])
    }

    pub fn get(&self, id: &str) -> Result<Spectrogram> {
        let i = self.slot(id)?;
        let mut s = Spectrogram::from_values(self.data[i].iter().map(|&v| v as f64).collect(), self.frames[i]);
        s.normalized = true;
        Ok(s)
    }

    /// `len` frames starting at a uniform random offset (cyclic when the
    /// utterance is shorter).
    pub fn random_crop<R: Rng + ?Sized>(&self, id: &str, len: usize, rng: &mut R) -> Result<Spectrogram> {
        let i = self.slot(id)?;
        let frames = self.frames[i];
        let offset = if frames > len { rng.gen_range(0..=frames - len) } else { 0 };
        let src = &self.data[i];
        let mut values = Vec::with_capacity(crate::frontend::FREQ_BINS * len);
        for row in src.chunks(frames) {
            values.extend((0..len).map(|t| row[(offset + t) % frames] as f64));
        }
        let mut s = Spectrogram::from_values(values, len);
        s.normalized = true;
        Ok(s)
    }
}

/// Per-epoch log line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Top-1 accuracy for identification, EER for contrastive; NaN when no
    /// validation set exists.
    pub val_metric: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.epoch, self.stage, self.loss, self.val_metric, self.lr)
    }
}

impl FromStr for EpochRecord {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = s.split_whitespace().collect();
        let [epoch, stage, loss, val, lr] = f[..] else {
            return Err(format!("bad epoch record `{s}`"));
        };
        let num = |x: &str| x.parse::<f64>().map_err(|_| format!("bad number `{x}`"));
        Ok(Self {
            epoch: epoch.parse().map_err(|_| format!("bad epoch `{epoch}`"))?,
            stage: stage.parse()?,
            loss: num(loss)?,
            val_metric: num(val)?,
            lr: num(lr)?,
        })
    }
}

/// Everything needed to continue a stage after its last completed epoch.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    /// Next epoch to run.
    pub epoch: usize,
    pub params: ParamSet,
    pub velocity: ParamSet,
    /// Best validation score so far (higher accuracy or lower EER).
    pub best_metric: Option<f64>,
    pub best_params: Option<ParamSet>,
    pub bad_epochs: usize,
    pub finished: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(stage: Stage, params: ParamSet) -> Self {
        Self {
            stage,
            epoch: 0,
            params,
            velocity: ParamSet::new(),
            best_metric: None,
            best_params: None,
            bad_epochs: 0,
            finished: false,
            history: Vec::new(),
        }
    }

    /// Parameters to carry forward: the best validated ones if any.
    pub fn final_params(&self) -> &ParamSet {
        self.best_params.as_ref().unwrap_or(&self.params)
    }

    pub fn metrics_log(&self) -> String {
        self.history.iter().map(|r| format!("{r}\n")).collect()
    }

    fn meta_text(&self) -> String {
        let mut out = format!(
            "stage={}\nepoch={}\nbad_epochs={}\nfinished={}\nbest_metric={}\n",
            self.stage,
            self.epoch,
            self.bad_epochs,
            self.finished,
            self.best_metric.map_or("none".to_string(), |m| m.to_string()),
        );
        for r in &self.history {
            out.push_str(&format!("history={r}\n"));
        }
        out
    }

    /// Writes `state.txt`, `params.ckpt`, `velocity.ckpt` and, when present,
    /// `best.ckpt` under `dir`.
    pub fn save(&self, dir: &Path, fingerprint: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        Checkpoint::from_params(&self.params, fingerprint).save(dir.join("params.ckpt"))?;
        Checkpoint::from_params(&self.velocity, fingerprint).save(dir.join("velocity.ckpt"))?;
        if let Some(best) = &self.best_params {
            Checkpoint::from_params(best, fingerprint).save(dir.join("best.ckpt"))?;
        }
        let tmp = dir.join("state.txt.tmp");
        std::fs::write(&tmp, self.meta_text())?;
        std::fs::rename(tmp, dir.join("state.txt"))?;
        Ok(())
    }

    /// Restores a state saved by [`TrainState::save`]; `template` supplies
    /// parameter names, shapes and trainable flags.
    pub fn load(dir: &Path, template: &ParamSet, fingerprint: u64) -> Result<Self> {
        let meta = std::fs::read_to_string(dir.join("state.txt"))?;
        let bad = |m: String| TrainError::State(m);
        let mut fields: HashMap<&str, &str> = HashMap::new();
        let mut history = Vec::new();
        for line in meta.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line `{line}`")))?;
            if k == "history" {
                history.push(v.parse().map_err(bad)?);
            } else {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
        let load_params = |name: &str| -> Result<ParamSet> {
            let mut p = template.clone();
            Checkpoint::load(dir.join(name))?.apply_to(&mut p, fingerprint)?;
            Ok(p)
        };
        let velocity = Checkpoint::load(dir.join("velocity.ckpt"))?;
        if velocity.fingerprint != fingerprint {
            return Err(NdError::Fingerprint {
                expected: fingerprint,
                found: velocity.fingerprint,
            }
            .into());
        }
        let best_metric = match get("best_metric")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| bad(format!("bad best_metric `{v}`")))?),
        };
        Ok(Self {
            stage: get("stage")?.parse().map_err(bad)?,
            epoch: get("epoch")?.parse().map_err(|_| bad("bad epoch".into()))?,
            params: load_params("params.ckpt")?,
            velocity: velocity.to_params()?,
            best_params: if best_metric.is_some() {
                Some(load_params("best.ckpt")?)
            } else {
                None
            },
            best_metric,
            bad_epochs: get("bad_epochs")?.parse().map_err(|_| bad("bad bad_epochs".into()))?,
            finished: get("finished")?.parse().map_err(|_| bad("bad finished".into()))?,
            history,
        })
    }
}

/// What the epoch callback wants next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Halted,
}

fn check_finite(loss: f64, stage: Stage, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Divergence { stage, epoch, loss })
    }
}

/// Records an epoch's validation result and decides whether to stop.
fn track_best(state: &mut TrainState, metric: f64, higher_is_better: bool, patience: usize) {
    if metric.is_nan() {
        state.best_params = None;
        return;
    }
    let improved = match state.best_metric {
        None => true,
        Some(b) if higher_is_better => metric > b,
        Some(b) => metric < b,
    };
    if improved {
        state.best_metric = Some(metric);
        state.best_params = Some(state.params.clone());
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
        if state.bad_epochs >= patience {
            state.finished = true;
        }
    }
}

/// Top-1 accuracy of the classification head on full utterances.
pub fn identification_accuracy(trunk: &Trunk, params: &ParamSet, bank: &FeatureBank, set: &ExampleSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for e in &set.examples {
        let out = trunk.infer(params, batch_tensor(&[&bank.get(&e.utterance_id)?])?)?;
        let logits = out.logits.expect("classification head");
        let best = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        correct += (best == e.label) as usize;
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Unit-normalized full-utterance embeddings of every example.
pub fn embed_examples(trunk: &Trunk, params: &ParamSet, bank: &FeatureBank, set: &ExampleSet) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::with_capacity(set.len());
    for e in &set.examples {
        let o = trunk.infer(params, batch_tensor(&[&bank.get(&e.utterance_id)?])?)?;
        out.insert(e.utterance_id.clone(), l2_normalized(o.embedding.expect("embedding head").into_data()));
    }
    Ok(out)
}

/// EER over every pair of validation utterances.
pub fn validation_eer(trunk: &Trunk, params: &ParamSet, bank: &FeatureBank, set: &ExampleSet) -> Result<f64> {
    if set.speakers() < 2 {
        return Ok(f64::NAN);
    }
    let emb = embed_examples(trunk, params, bank, set)?;
    let ex = &set.examples;
    let mut scores = Vec::with_capacity(ex.len() * (ex.len() - 1) / 2);
    for i in 0..ex.len() {
        for j in i + 1..ex.len() {
            let d = euclidean(&emb[&ex[i].utterance_id], &emb[&ex[j].utterance_id]);
            scores.push((d, ex[i].speaker_id == ex[j].speaker_id));
        }
    }
    match ScoreSet::new(scores) {
        Ok(s) => Ok(eer(&s)),
        Err(_) => Ok(f64::NAN),
    }
}

fn optimizer(cfg: &SgdConfig, state: &TrainState, f32_storage: bool) -> Sgd {
    let mut sgd = Sgd::new(cfg.clone()).with_f32_storage(f32_storage);
    sgd.set_velocity(state.velocity.clone());
    sgd
}

/// Softmax pre-training over random crops until `epochs` or until the
/// validation accuracy has not improved for `patience` epochs.
pub fn pretrain_identification(
    trunk: &Trunk,
    state: &mut TrainState,
    bank: &FeatureBank,
    train: &ExampleSet,
    val: &ExampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<Control>,
) -> Result<Outcome> {
    if state.stage != Stage::Identification {
        return Err(TrainError::StageOrder {
            expected: Stage::Identification,
            found: state.stage,
        });
    }
    if trunk.head() != HeadKind::Classification {
        return Err(TrunkError::HeadMismatch {
            expected: HeadKind::Classification,
            found: trunk.head(),
        }
        .into());
    }
    if train.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    if let Some(e) = train.examples.iter().find(|e| e.label >= trunk.config().num_classes) {
        return Err(TrainError::Config(format!(
            "label {} of `{}` exceeds num_classes {}",
            e.label,
            e.utterance_id,
            trunk.config().num_classes
        )));
    }
    let sgd_cfg = &cfg.pretrain;
    let mut sgd = optimizer(sgd_cfg, state, cfg.f32_storage);
    while state.epoch < sgd_cfg.epochs && !state.finished {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "pretrain-order", epoch as u64));
        let mut crop_rng = substream(cfg.seed, "pretrain-crops", epoch as u64);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(sgd_cfg.batch_size) {
            let crops = batch
                .iter()
                .map(|&i| bank.random_crop(&train.examples[i].utterance_id, cfg.crop_frames, &mut crop_rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.examples[i].label).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&crops.iter().collect::<Vec<_>>())?);
            let vars = trunk.forward(&state.params, &mut tape, x, Mode::Train)?;
            let loss = tape.softmax_xent(vars.output, &labels)?;
            let lv = tape.value(loss).data()[0];
            check_finite(lv, Stage::Identification, epoch)?;
            total += lv * batch.len() as f64;
            seen += batch.len();
            let grads = tape.backward(loss)?;
            state.params.zero_grad();
            grads.accumulate_into(&mut state.params)?;
            sgd.step(&mut state.params, epoch)?;
            apply_bn_updates(&mut state.params, &vars.bn_updates, cfg.f32_storage)?;
        }
        let acc = identification_accuracy(trunk, &state.params, bank, val)?;
        state.velocity = sgd.velocity().clone();
        state.history.push(EpochRecord {
            epoch,
            stage: Stage::Identification,
            loss: total / seen as f64,
            val_metric: acc,
            lr: sgd_cfg.lr(epoch),
        });
        track_best(state, acc, true, cfg.patience);
        state.epoch += 1;
        if on_epoch(state)? == Control::Halt {
            return Ok(Outcome::Halted);
        }
    }
    Ok(Outcome::Completed)
}

/// Contrastive fine-tuning. Each epoch mines hard negatives from a fresh
/// random pool scored with the current weights, then trains on batches
/// that mix mined pairs with fresh random pairs.
pub fn finetune_contrastive(
    trunk: &Trunk,
    state: &mut TrainState,
    bank: &FeatureBank,
    train: &ExampleSet,
    val: &ExampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<Control>,
) -> Result<Outcome> {
    if state.stage != Stage::Contrastive {
        return Err(TrainError::StageOrder {
            expected: Stage::Contrastive,
            found: state.stage,
        });
    }
    if trunk.head() != HeadKind::Embedding {
        return Err(TrunkError::HeadMismatch {
            expected: HeadKind::Embedding,
            found: trunk.head(),
        }
        .into());
    }
    let sgd_cfg = &cfg.finetune;
    let batch = sgd_cfg.batch_size;
    let hard_per_batch = cfg.hard_per_batch();
    let batches = cfg.pairs_per_epoch.div_ceil(batch);
    let n_hard = batches * hard_per_batch;
    let n_random = batches * batch - n_hard;
    let mut sgd = optimizer(sgd_cfg, state, cfg.f32_storage);
    while state.epoch < sgd_cfg.epochs && !state.finished {
        let epoch = state.epoch as u64;
        let hard = if n_hard > 0 {
            let pool_rng = &mut substream(cfg.seed, "mining-pool", epoch);
            let pool = sample_pairs(train, n_hard * cfg.pool_factor, 0.0, pool_rng)?;
            let emb = embed_examples(trunk, &state.params, bank, train)?;
            let d: Vec<f64> = pool.iter().map(|p| euclidean(&emb[&p.utt_a], &emb[&p.utt_b])).collect();
            let mut mined = mine_hard_negatives(&pool, &d, cfg.keep_fraction)?;
            mined.truncate(n_hard);
            mined.shuffle(&mut substream(cfg.seed, "mining-order", epoch));
            mined
        } else {
            Vec::new()
        };
        let random = sample_pairs(train, n_random, cfg.pos_fraction, &mut substream(cfg.seed, "pairs", epoch))?;
        let mut crop_rng = substream(cfg.seed, "finetune-crops", epoch);
        let (mut total, mut count) = (0.0, 0usize);
        let (mut hi, mut ri) = (hard.iter(), random.iter());
        for _ in 0..batches {
            let pairs: Vec<&PairSample> = hi.by_ref().take(hard_per_batch).chain(ri.by_ref().take(batch - hard_per_batch)).collect();
            if pairs.is_empty() {
                break;
            }
            // each utterance enters the batch once, with one crop
            let mut slots: HashMap<String, usize> = HashMap::new();
            let mut ids: Vec<String> = Vec::new();
            let mut slot = |id: &String| {
                *slots.entry(id.clone()).or_insert_with(|| {
                    ids.push(id.clone());
                    ids.len() - 1
                })
            };
            let triples: Vec<(usize, usize, bool)> =
                pairs.iter().map(|p| (slot(&p.utt_a), slot(&p.utt_b), p.positive)).collect();
            let crops = ids
                .iter()
                .map(|id| bank.random_crop(id, cfg.crop_frames, &mut crop_rng))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&crops.iter().collect::<Vec<_>>())?);
            let vars = trunk.forward(&state.params, &mut tape, x, Mode::Train)?;
            let emb = tape.l2_normalize(vars.output)?;
            let loss = tape.contrastive(emb, &triples, cfg.margin)?;
            let lv = tape.value(loss).data()[0];
            check_finite(lv, Stage::Contrastive, state.epoch)?;
            total += lv * pairs.len() as f64;
            count += pairs.len();
            let grads = tape.backward(loss)?;
            state.params.zero_grad();
            grads.accumulate_into(&mut state.params)?;
            sgd.step(&mut state.params, state.epoch)?;
            apply_bn_updates(&mut state.params, &vars.bn_updates, cfg.f32_storage)?;
        }
        let val_eer = validation_eer(trunk, &state.params, bank, val)?;
        state.velocity = sgd.velocity().clone();
        state.history.push(EpochRecord {
            epoch: state.epoch,
            stage: Stage::Contrastive,
            loss: if count > 0 { total / count as f64 } else { 0.0 },
            val_metric: val_eer,
            lr: sgd_cfg.lr(state.epoch),
        });
        track_best(state, val_eer, false, cfg.patience);
        state.epoch += 1;
        if on_epoch(state)? == Control::Halt {
            return Ok(Outcome::Halted);
        }
    }
    Ok(Outcome::Completed)
}
