//! Speaker/utterance manifests.
//!
//! The on-disk format is UTF-8 text: a `vexkit-manifest v1` header line,
//! then one record per line. Speaker lines are
//! `S <id> <gender> <nationality> <split>` and utterance lines are
//! `U <id> <speaker> <video> <audio path> <duration seconds>`, all fields
//! tab-separated.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const MANIFEST_HEADER: &str = "vexkit-manifest v1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("utterance `{utterance}` references unknown speaker `{speaker}`")]
    MissingSpeaker { utterance: String, speaker: String },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "male" | "m" => Ok(Self::Male),
            "female" | "f" => Ok(Self::Female),
            "unknown" => Ok(Self::Unknown),
            other => Err(format!("unknown gender `{other}`")),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Male => "male",
            Self::Female => "female",
            Self::Unknown => "unknown",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dev => "dev",
            Self::Test => "test",
        })
    }
}

/// Nationality value for speakers without a label.
pub const UNKNOWN_NATIONALITY: &str = "unknown";

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub gender: Gender,
    pub nationality: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub video_id: String,
    pub audio_path: PathBuf,
    pub duration_s: f64,
}

/// A validated catalog of speakers and their utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    speakers: Vec<SpeakerRecord>,
    utterances: Vec<UtteranceRecord>,
    speaker_index: HashMap<String, usize>,
    utterance_index: HashMap<String, usize>,
}

fn valid_field(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Manifest {
    pub fn new(
        speakers: Vec<SpeakerRecord>,
        utterances: Vec<UtteranceRecord>,
    ) -> Result<Self, ManifestError> {
        let mut speaker_index = HashMap::with_capacity(speakers.len());
        for (i, s) in speakers.iter().enumerate() {
            if !valid_field(&s.speaker_id) || !valid_field(&s.nationality) {
                return Err(ManifestError::Invalid(format!(
                    "speaker fields must be nonempty and tab-free: {:?}",
                    s.speaker_id
                )));
            }
            if speaker_index.insert(s.speaker_id.clone(), i).is_some() {
                return Err(ManifestError::DuplicateId {
                    kind: "speaker",
                    id: s.speaker_id.clone(),
                });
            }
        }
        let mut utterance_index = HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if !valid_field(&u.utterance_id) || !valid_field(&u.video_id) {
                return Err(ManifestError::Invalid(format!(
                    "utterance fields must be nonempty and tab-free: {:?}",
                    u.utterance_id
                )));
            }
            if !(u.duration_s > 0.0 && u.duration_s.is_finite()) {
                return Err(ManifestError::Invalid(format!(
                    "utterance `{}` has non-positive duration {}",
                    u.utterance_id, u.duration_s
                )));
            }
            if !speaker_index.contains_key(&u.speaker_id) {
                return Err(ManifestError::MissingSpeaker {
                    utterance: u.utterance_id.clone(),
                    speaker: u.speaker_id.clone(),
                });
            }
            if utterance_index.insert(u.utterance_id.clone(), i).is_some() {
                return Err(ManifestError::DuplicateId {
                    kind: "utterance",
                    id: u.utterance_id.clone(),
                });
            }
        }
        Ok(Self {
            speakers,
            utterances,
            speaker_index,
            utterance_index,
        })
    }

    pub fn speakers(&self) -> &[SpeakerRecord] {
        &self.speakers
    }

    pub fn utterances(&self) -> &[UtteranceRecord] {
        &self.utterances
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerRecord> {
        self.speaker_index.get(id).map(|&i| &self.speakers[i])
    }

    pub fn utterance(&self, id: &str) -> Option<&UtteranceRecord> {
        self.utterance_index.get(id).map(|&i| &self.utterances[i])
    }

    /// Speaker of an utterance, if both exist.
    pub fn speaker_of(&self, utterance_id: &str) -> Option<&SpeakerRecord> {
        self.utterance(utterance_id)
            .and_then(|u| self.speaker(&u.speaker_id))
    }

    /// Utterances grouped by speaker, in speaker order.
    pub fn utterances_by_speaker(&self) -> Vec<(&SpeakerRecord, Vec<&UtteranceRecord>)> {
        let mut groups: Vec<Vec<&UtteranceRecord>> = vec![Vec::new(); self.speakers.len()];
        for u in &self.utterances {
            groups[self.speaker_index[&u.speaker_id]].push(u);
        }
        self.speakers.iter().zip(groups).collect()
    }

    pub fn ids_in_split(&self, split: Split) -> BTreeSet<String> {
        self.speakers
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.speaker_id.clone())
            .collect()
    }

    /// Restricts to the speakers of one split and their utterances.
    pub fn filter_split(&self, split: Split) -> Manifest {
        let speakers: Vec<_> = self
            .speakers
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect();
        let keep: HashSet<&str> = speakers.iter().map(|s| s.speaker_id.as_str()).collect();
        let utterances = self
            .utterances
            .iter()
            .filter(|u| keep.contains(u.speaker_id.as_str()))
            .cloned()
            .collect();
        Manifest::new(speakers, utterances).expect("subset of a valid manifest")
    }

    /// Keeps all speakers but only the utterances accepted by `keep`.
    pub fn retain_utterances(&self, mut keep: impl FnMut(&UtteranceRecord) -> bool) -> Manifest {
        let utterances = self.utterances.iter().filter(|u| keep(u)).cloned().collect();
        Manifest::new(self.speakers.clone(), utterances).expect("subset of a valid manifest")
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(ManifestError::Parse {
                    line: 1,
                    msg: format!("expected header `{MANIFEST_HEADER}`"),
                })
            }
        }
        let mut speakers = Vec::new();
        let mut utterances = Vec::new();
        for (i, raw) in lines {
            let line = i + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.is_empty() {
                continue;
            }
            let err = |msg: String| ManifestError::Parse { line, msg };
            let fields: Vec<&str> = raw.split('\t').collect();
            match fields.as_slice() {
                ["S", id, gender, nat, split] => speakers.push(SpeakerRecord {
                    speaker_id: id.to_string(),
                    gender: gender.parse().map_err(err)?,
                    nationality: nat.to_string(),
                    split: split.parse().map_err(err)?,
                }),
                ["U", id, spk, video, path, dur] => utterances.push(UtteranceRecord {
                    utterance_id: id.to_string(),
                    speaker_id: spk.to_string(),
                    video_id: video.to_string(),
                    audio_path: PathBuf::from(path),
                    duration_s: dur
                        .parse()
                        .map_err(|_| err(format!("bad duration `{dur}`")))?,
                }),
                ["S", ..] => return Err(err(format!("speaker record needs 5 fields, got {}", fields.len()))),
                ["U", ..] => return Err(err(format!("utterance record needs 6 fields, got {}", fields.len()))),
                [tag, ..] => return Err(err(format!("unknown record kind `{tag}`"))),
                [] => unreachable!("split yields at least one field"),
            }
        }
        Manifest::new(speakers, utterances)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 * (self.speakers.len() + self.utterances.len()));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for s in &self.speakers {
            out.push_str(&format!(
                "S\t{}\t{}\t{}\t{}\n",
                s.speaker_id, s.gender, s.nationality, s.split
            ));
        }
        for u in &self.utterances {
            out.push_str(&format!(
                "U\t{}\t{}\t{}\t{}\t{:?}\n",
                u.utterance_id,
                u.speaker_id,
                u.video_id,
                u.audio_path.display(),
                u.duration_s
            ));
        }
        out
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    Manifest::parse(&std::fs::read_to_string(path)?)
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<(), ManifestError> {
    std::fs::write(path, m.to_text())?;
    Ok(())
}

/// Aggregate dataset statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub pois: usize,
    pub male_pois: usize,
    pub videos: usize,
    pub utterances: usize,
    pub total_seconds: f64,
    pub avg_videos_per_poi: f64,
    pub avg_utterances_per_poi: f64,
    pub avg_utterance_s: f64,
}

impl StatsReport {
    pub fn total_hours(&self) -> f64 {
        self.total_seconds / 3600.0
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# of POIs\t{}", self.pois)?;
        writeln!(f, "# of male POIs\t{}", self.male_pois)?;
        writeln!(f, "# of videos\t{}", self.videos)?;
        writeln!(f, "# of hours\t{}", (self.total_hours() + 0.5).floor() as u64)?;
        writeln!(f, "# of utterances\t{}", self.utterances)?;
        writeln!(f, "Avg # of videos per POI\t{:.0}", self.avg_videos_per_poi)?;
        writeln!(f, "Avg # of utterances per POI\t{:.0}", self.avg_utterances_per_poi)?;
        write!(f, "Avg length of utterances (s)\t{:.1}", self.avg_utterance_s)
    }
}

pub fn manifest_stats(m: &Manifest) -> StatsReport {
    let pois = m.speakers.len();
    let male_pois = m.speakers.iter().filter(|s| s.gender == Gender::Male).count();
    let videos = m
        .utterances
        .iter()
        .map(|u| u.video_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    let utterances = m.utterances.len();
    let total_seconds: f64 = m.utterances.iter().map(|u| u.duration_s).sum();
    let per_poi = |x: f64| if pois == 0 { 0.0 } else { x / pois as f64 };
    StatsReport {
        pois,
        male_pois,
        videos,
        utterances,
        total_seconds,
        avg_videos_per_poi: per_poi(videos as f64),
        avg_utterances_per_poi: per_poi(utterances as f64),
        avg_utterance_s: if utterances == 0 {
            0.0
        } else {
            total_seconds / utterances as f64
        },
    }
}

/// Dev-split speaker ids of `m` that also appear in `other_ids`, sorted.
pub fn check_disjoint(m: &Manifest, other_ids: &HashSet<String>) -> Vec<String> {
    let mut out: Vec<String> = m
        .speakers
        .iter()
        .filter(|s| s.split == Split::Dev && other_ids.contains(&s.speaker_id))
        .map(|s| s.speaker_id.clone())
        .collect();
    out.sort();
    out
}
