//! Utterance embeddings and trial scoring under three test-time protocols:
//! one pass over the full utterance, the mean of ten crop embeddings, and
//! the mean distance over all 10 x 10 crop pairs.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;
use vexkit_ndgrad::ParamSet;

use crate::frontend::{ten_crops, Spectrogram, NUM_TEST_CROPS};
use crate::metrics::ScoreSet;
use crate::trials::TrialList;
use crate::trunk::{batch_tensor, HeadKind, Trunk, TrunkError};

pub use vexkit_ndgrad::loss::euclidean;

pub const EMBEDDINGS_HEADER: &str = "vexkit-embeddings v1";
pub const SCORES_HEADER: &str = "vexkit-scores v1 polarity=distance";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("utterance has {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error("protocol {protocol} needs {missing} embeddings")]
    ProtocolMismatch { protocol: Protocol, missing: &'static str },
    #[error("trunk has a {0} head, expected an embedding head")]
    WrongHead(HeadKind),
    #[error("no embeddings for utterance `{0}`")]
    MissingUtterance(String),
    #[error("features unavailable: {0}")]
    Features(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Trunk(#[from] TrunkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    /// Average pool over the whole utterance.
    Full = 1,
    /// Re-normalized mean of the ten crop embeddings.
    CropMean = 2,
    /// Mean of the 100 crop-pair distances.
    CropPairs = 3,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Full, Protocol::CropMean, Protocol::CropPairs];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Self::Full),
            "2" => Ok(Self::CropMean),
            "3" => Ok(Self::CropPairs),
            other => Err(format!("unknown protocol `{other}` (expected 1, 2 or 3)")),
        }
    }
}

/// Unit-normalized embeddings of one utterance. Fields are absent when the
/// corresponding protocol was not computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UtteranceEmbeddings {
    pub full: Option<Vec<f64>>,
    pub mean: Option<Vec<f64>>,
    pub crops: Option<Vec<Vec<f64>>>,
}

pub fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn check_head(trunk: &Trunk) -> Result<()> {
    match trunk.head() {
        HeadKind::Embedding => Ok(()),
        other => Err(EmbedError::WrongHead(other)),
    }
}

fn rows(t: vexkit_ndgrad::Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.into_data().chunks(d).map(|r| l2_normalized(r.to_vec())).collect()
}

/// One evaluation pass over the whole (normalized) utterance.
pub fn embed_full(trunk: &Trunk, params: &ParamSet, s: &Spectrogram) -> Result<Vec<f64>> {
    check_head(trunk)?;
    let min = trunk.min_frames();
    if s.frames() < min {
        return Err(EmbedError::TooShort { frames: s.frames(), min });
    }
    let out = trunk.infer(params, batch_tensor(&[s])?)?;
    Ok(rows(out.embedding.expect("embedding head")).remove(0))
}

/// Ten crop embeddings and their re-normalized mean.
pub fn embed_crops(trunk: &Trunk, params: &ParamSet, s: &Spectrogram) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_head(trunk)?;
    let crops = ten_crops(s);
    let refs: Vec<&Spectrogram> = crops.iter().collect();
    let out = trunk.infer(params, batch_tensor(&refs)?)?;
    let crops = rows(out.embedding.expect("embedding head"));
    let mut mean = vec![0.0; crops[0].len()];
    for c in &crops {
        mean.iter_mut().zip(c).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= NUM_TEST_CROPS as f64);
    Ok((l2_normalized(mean), crops))
}

pub fn embed_utterance(trunk: &Trunk, params: &ParamSet, s: &Spectrogram) -> Result<UtteranceEmbeddings> {
    let full = embed_full(trunk, params, s)?;
    let (mean, crops) = embed_crops(trunk, params, s)?;
    Ok(UtteranceEmbeddings {
        full: Some(full),
        mean: Some(mean),
        crops: Some(crops),
    })
}

/// Embeds many utterances, preserving input order. `threads` of 0 uses the
/// ambient rayon pool.
pub fn embed_all<F>(trunk: &Trunk, params: &ParamSet, ids: &[String], load: F, threads: usize) -> Result<Vec<UtteranceEmbeddings>>
where
    F: Fn(&str) -> Result<Spectrogram> + Sync,
{
    let work = || {
        ids.par_iter()
            .map(|id| embed_utterance(trunk, params, &load(id)?))
            .collect::<Result<Vec<_>>>()
    };
    if threads == 0 {
        return work();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(work)
}

/// Mean of the pairwise crop distances, summed in sorted order so the
/// result does not depend on argument order.
pub fn crop_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| euclidean(x, y))).collect();
    d.sort_by(f64::total_cmp);
    d.iter().sum::<f64>() / d.len() as f64
}

pub fn score_pair(a: &UtteranceEmbeddings, b: &UtteranceEmbeddings, protocol: Protocol) -> Result<f64> {
    let missing = |what| EmbedError::ProtocolMismatch { protocol, missing: what };
    match protocol {
        Protocol::Full => match (&a.full, &b.full) {
            (Some(x), Some(y)) => Ok(euclidean(x, y)),
            _ => Err(missing("full-utterance")),
        },
        Protocol::CropMean => match (&a.mean, &b.mean) {
            (Some(x), Some(y)) => Ok(euclidean(x, y)),
            _ => Err(missing("crop-mean")),
        },
        Protocol::CropPairs => match (&a.crops, &b.crops) {
            (Some(x), Some(y)) => Ok(crop_pair_distance(x, y)),
            _ => Err(missing("per-crop")),
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub trial_id: usize,
    pub utt_a: String,
    pub utt_b: String,
    pub distance: f64,
    pub target: Option<bool>,
}

/// Scores every trial of `list` with embeddings looked up by id.
pub fn score_trials<'a>(
    list: &TrialList,
    lookup: impl Fn(&str) -> Option<&'a UtteranceEmbeddings>,
    protocol: Protocol,
) -> Result<Vec<TrialScore>> {
    list.pairs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let get = |id: &str| lookup(id).ok_or_else(|| EmbedError::MissingUtterance(id.to_string()));
            Ok(TrialScore {
                trial_id: i,
                utt_a: t.utt_a.clone(),
                utt_b: t.utt_b.clone(),
                distance: score_pair(get(&t.utt_a)?, get(&t.utt_b)?, protocol)?,
                target: Some(t.target),
            })
        })
        .collect()
}

pub fn scores_to_text(scores: &[TrialScore]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for s in scores {
        let _ = write!(out, "{}\t{}\t{}\t{}", s.trial_id, s.utt_a, s.utt_b, s.distance);
        match s.target {
            Some(true) => out.push_str("\ttarget\n"),
            Some(false) => out.push_str("\tnontarget\n"),
            None => out.push('\n'),
        }
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<TrialScore>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCORES_HEADER => {}
        _ => {
            return Err(EmbedError::Parse {
                line: 1,
                msg: format!("expected header `{SCORES_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| EmbedError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 && f.len() != 5 {
            return Err(err(format!("expected 4 or 5 tab-separated fields, got {}", f.len())));
        }
        let trial_id = f[0].parse().map_err(|_| err(format!("bad trial id `{}`", f[0])))?;
        let distance: f64 = f[3].parse().map_err(|_| err(format!("bad distance `{}`", f[3])))?;
        if !(distance >= 0.0 && distance.is_finite()) {
            return Err(err(format!("distance {distance} must be finite and nonnegative")));
        }
        let target = match f.get(4).copied() {
            None => None,
            Some("target") => Some(true),
            Some("nontarget") => Some(false),
            Some(other) => return Err(err(format!("bad label `{other}`"))),
        };
        out.push(TrialScore {
            trial_id,
            utt_a: f[1].to_string(),
            utt_b: f[2].to_string(),
            distance,
            target,
        });
    }
    Ok(out)
}

/// Labelled scores as a metric input; unlabelled lines are skipped.
pub fn score_set(scores: &[TrialScore]) -> std::result::Result<ScoreSet, crate::metrics::MetricsError> {
    ScoreSet::new(scores.iter().filter_map(|s| s.target.map(|t| (s.distance, t))).collect())
}

fn push_vector(out: &mut String, id: &str, kind: &str, v: &[f64]) {
    let _ = write!(out, "{id}\t{kind}\t");
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x}");
    }
    out.push('\n');
}

/// Text form: header with the dimension, then `utt<TAB>kind<TAB>values`
/// where kind is `full`, `mean` or `crop0`..`crop9`. Values use the
/// shortest representation that parses back to the same bits.
pub fn embeddings_to_text(items: &[(String, UtteranceEmbeddings)]) -> String {
    let dim = items
        .iter()
        .find_map(|(_, e)| e.full.as_ref().or(e.mean.as_ref()).map(Vec::len))
        .unwrap_or(0);
    let mut out = format!("{EMBEDDINGS_HEADER} dim={dim}\n");
    for (id, e) in items {
        if let Some(v) = &e.full {
            push_vector(&mut out, id, "full", v);
        }
        if let Some(v) = &e.mean {
            push_vector(&mut out, id, "mean", v);
        }
        for (k, v) in e.crops.iter().flatten().enumerate() {
            push_vector(&mut out, id, &format!("crop{k}"), v);
        }
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<Vec<(String, UtteranceEmbeddings)>> {
    let mut lines = text.lines().enumerate();
    let header_err = || EmbedError::Parse {
        line: 1,
        msg: format!("expected header `{EMBEDDINGS_HEADER} dim=D`"),
    };
    let dim: usize = lines
        .next()
        .and_then(|(_, h)| h.trim_end().strip_prefix(EMBEDDINGS_HEADER))
        .and_then(|rest| rest.trim().strip_prefix("dim="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(header_err)?;
    let mut out: Vec<(String, UtteranceEmbeddings)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| EmbedError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        let [id, kind, values] = f[..] else {
            return Err(err("expected `utt<TAB>kind<TAB>values`".into()));
        };
        let v = values
            .split(' ')
            .map(|x| x.parse::<f64>().map_err(|_| err(format!("bad value `{x}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != dim {
            return Err(err(format!("vector has {} values, header says {dim}", v.len())));
        }
        if out.last().map_or(true, |(last, _)| last != id) {
            out.push((id.to_string(), UtteranceEmbeddings::default()));
        }
        let e = &mut out.last_mut().expect("pushed").1;
        match kind {
            "full" => e.full = Some(v),
            "mean" => e.mean = Some(v),
            k => match k.strip_prefix("crop").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) if n < NUM_TEST_CROPS => {
                    let crops = e.crops.get_or_insert_with(Vec::new);
                    if crops.len() != n {
                        return Err(err(format!("crop{n} out of order")));
                    }
                    crops.push(v);
                }
                _ => return Err(err(format!("unknown kind `{k}`"))),
            },
        }
    }
    if let Some((id, _)) = out.iter().find(|(_, e)| e.crops.as_ref().is_some_and(|c| c.len() != NUM_TEST_CROPS)) {
        return Err(EmbedError::Parse {
            line: 0,
            msg: format!("utterance `{id}` has an incomplete crop set"),
        });
    }
    Ok(out)
}

pub fn save_embeddings(items: &[(String, UtteranceEmbeddings)], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, embeddings_to_text(items))?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, UtteranceEmbeddings)>> {
    parse_embeddings(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalized(v.to_vec())
    }

    #[test]
    fn protocol_parse() {
        assert_eq!("3".parse::<Protocol>().unwrap(), Protocol::CropPairs);
        assert!("4".parse::<Protocol>().is_err());
    }

    #[test]
    fn missing_protocol_data() {
        let a = UtteranceEmbeddings {
            full: Some(unit(&[1.0, 0.0])),
            ..Default::default()
        };
        assert!(score_pair(&a, &a, Protocol::Full).is_ok());
        assert!(matches!(
            score_pair(&a, &a, Protocol::CropPairs),
            Err(EmbedError::ProtocolMismatch { .. })
        ));
    }

    #[test]
    fn embeddings_text_round_trip() {
        let e = UtteranceEmbeddings {
            full: Some(unit(&[0.1, 0.7, -0.3])),
            mean: Some(unit(&[1.0, 2.0, 3.0])),
            crops: Some((0..10).map(|k| unit(&[k as f64, 1.0, 1.0 / 3.0])).collect()),
        };
        let items = vec![("u1".to_string(), e.clone()), ("u2".to_string(), e)];
        let text = embeddings_to_text(&items);
        assert!(text.starts_with("vexkit-embeddings v1 dim=3\n"));
        assert_eq!(parse_embeddings(&text).unwrap(), items);
    }

    #[test]
    fn scores_text_round_trip() {
        let s = vec![
            TrialScore {
                trial_id: 0,
                utt_a: "a".into(),
                utt_b: "b".into(),
                distance: 0.123456789,
                target: Some(true),
            },
            TrialScore {
                trial_id: 1,
                utt_a: "a".into(),
                utt_b: "c".into(),
                distance: 1.5,
                target: None,
            },
        ];
        let text = scores_to_text(&s);
        assert!(text.starts_with(SCORES_HEADER));
        assert_eq!(parse_scores(&text).unwrap(), s);
        assert!(parse_scores("nope\n").is_err());
        assert!(matches!(
            parse_scores(&format!("{SCORES_HEADER}\n0\ta\tb\tx\n")),
            Err(EmbedError::Parse { line: 2, .. })
        ));
    }
}
