//! Verification trial lists: random whole-dataset pairs, hard pairs
//! restricted to one nationality and gender, and the plain-text list
//! format `label utt_a utt_b`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::manifest::{Gender, Manifest, UNKNOWN_NATIONALITY};

/// Attempts per pair before giving up on finding an unused one.
pub const MAX_RETRIES: usize = 100;
pub const DEFAULT_MIN_GROUP: usize = 5;

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("infeasible trial request: {0}")]
    Infeasible(String),
    #[error("no (nationality, gender) group has at least {min_group} speakers")]
    NoEligibleGroup { min_group: usize },
    #[error("could not find an unused pair after {MAX_RETRIES} attempts")]
    Exhausted,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trial references unknown utterance `{0}`")]
    UnknownUtterance(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrialError>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub target: bool,
    pub utt_a: String,
    pub utt_b: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialList {
    pub name: String,
    pub pairs: Vec<Trial>,
    /// Generator description (seed and parameters); empty for loaded lists.
    pub fingerprint: String,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.pairs.len() * 40);
        for t in &self.pairs {
            let _ = writeln!(out, "{} {} {}", t.target as u8, t.utt_a, t.utt_b);
        }
        out
    }

    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| TrialError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, a, b] = fields[..] else {
                return Err(err("expected `label utt_a utt_b`"));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                _ => return Err(err("label must be 0 or 1")),
            };
            if a == b {
                return Err(err("trial pairs an utterance with itself"));
            }
            pairs.push(Trial {
                target,
                utt_a: a.to_string(),
                utt_b: b.to_string(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            pairs,
            fingerprint: String::new(),
        })
    }

    /// Checks every label against the manifest's speaker ids.
    pub fn verify(&self, m: &Manifest) -> Result<()> {
        for (i, t) in self.pairs.iter().enumerate() {
            let spk = |u: &str| {
                m.utterance(u)
                    .map(|r| r.speaker_id.as_str())
                    .ok_or_else(|| TrialError::UnknownUtterance(u.to_string()))
            };
            if (spk(&t.utt_a)? == spk(&t.utt_b)?) != t.target {
                return Err(TrialError::Parse {
                    line: i + 1,
                    msg: format!("label {} disagrees with manifest", t.target as u8),
                });
            }
        }
        Ok(())
    }
}

pub fn load_trial_list(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TrialList::parse(&name, &std::fs::read_to_string(path)?)
}

pub fn save_trial_list(list: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, list.to_text())?;
    Ok(())
}

/// Speakers (with their utterance ids) that can be drawn from.
struct Pool<'a> {
    speakers: Vec<Vec<&'a str>>,
}

impl<'a> Pool<'a> {
    fn target<R: Rng + ?Sized>(&self, multi: &[usize], rng: &mut R) -> (&'a str, &'a str) {
        let utts = &self.speakers[*multi.choose(rng).expect("nonempty")];
        let picked: Vec<&&str> = utts.choose_multiple(rng, 2).collect();
        (picked[0], picked[1])
    }

    fn nontarget<R: Rng + ?Sized>(&self, rng: &mut R) -> (&'a str, &'a str) {
        let idx: Vec<usize> = rand::seq::index::sample(rng, self.speakers.len(), 2).into_vec();
        let a = self.speakers[idx[0]].choose(rng).expect("nonempty");
        let b = self.speakers[idx[1]].choose(rng).expect("nonempty");
        (a, b)
    }

    fn multi(&self) -> Vec<usize> {
        (0..self.speakers.len())
            .filter(|&i| self.speakers[i].len() >= 2)
            .collect()
    }
}

fn balanced_labels<R: Rng + ?Sized>(n_pairs: usize, rng: &mut R) -> Vec<bool> {
    let targets = n_pairs / 2;
    let mut labels: Vec<bool> = (0..n_pairs).map(|i| i < targets).collect();
    labels.shuffle(rng);
    labels
}

/// Draws pairs until one unseen (as an unordered pair) comes up.
fn draw_unique<'a>(
    seen: &mut HashSet<(&'a str, &'a str)>,
    mut draw: impl FnMut() -> (&'a str, &'a str),
) -> Result<(&'a str, &'a str)> {
    for _ in 0..MAX_RETRIES {
        let (a, b) = draw();
        let key = if a <= b { (a, b) } else { (b, a) };
        if seen.insert(key) {
            return Ok((a, b));
        }
    }
    Err(TrialError::Exhausted)
}

fn trial(target: bool, (a, b): (&str, &str)) -> Trial {
    Trial {
        target,
        utt_a: a.to_string(),
        utt_b: b.to_string(),
    }
}

/// Half-target random pairs over every speaker with utterances.
pub fn gen_random_trials<R: Rng + ?Sized>(m: &Manifest, n_pairs: usize, seed: u64, rng: &mut R) -> Result<TrialList> {
    let pool = Pool {
        speakers: m
            .utterances_by_speaker()
            .into_iter()
            .filter(|(_, u)| !u.is_empty())
            .map(|(_, u)| u.into_iter().map(|u| u.utterance_id.as_str()).collect())
            .collect(),
    };
    if n_pairs < 2 {
        return Err(TrialError::Infeasible(format!("need at least 2 pairs, got {n_pairs}")));
    }
    if pool.speakers.len() < 2 {
        return Err(TrialError::Infeasible("need at least 2 speakers with utterances".into()));
    }
    let multi = pool.multi();
    if multi.is_empty() {
        return Err(TrialError::Infeasible("no speaker has 2 utterances for a target pair".into()));
    }
    let mut seen = HashSet::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    for target in balanced_labels(n_pairs, rng) {
        let p = if target {
            draw_unique(&mut seen, || pool.target(&multi, rng))?
        } else {
            draw_unique(&mut seen, || pool.nontarget(rng))?
        };
        pairs.push(trial(target, p));
    }
    Ok(TrialList {
        name: "random".into(),
        pairs,
        fingerprint: format!("random seed={seed} n_pairs={n_pairs}"),
    })
}

/// `(nationality, gender)` groups with at least `min_group` speakers that
/// have utterances, excluding unknown labels.
pub fn eligible_groups(m: &Manifest, min_group: usize) -> BTreeMap<(String, Gender), Vec<Vec<String>>> {
    let mut groups: BTreeMap<(String, Gender), Vec<Vec<String>>> = BTreeMap::new();
    for (s, utts) in m.utterances_by_speaker() {
        if utts.is_empty() || s.gender == Gender::Unknown || s.nationality == UNKNOWN_NATIONALITY {
            continue;
        }
        groups
            .entry((s.nationality.clone(), s.gender))
            .or_default()
            .push(utts.iter().map(|u| u.utterance_id.clone()).collect());
    }
    groups.retain(|_, speakers| speakers.len() >= min_group);
    groups
}

/// Half-target pairs drawn inside one `(nationality, gender)` group, groups
/// chosen with probability proportional to their speaker count.
pub fn gen_hard_trials<R: Rng + ?Sized>(
    m: &Manifest,
    n_pairs: usize,
    min_group: usize,
    seed: u64,
    rng: &mut R,
) -> Result<TrialList> {
    if n_pairs < 2 {
        return Err(TrialError::Infeasible(format!("need at least 2 pairs, got {n_pairs}")));
    }
    let groups = eligible_groups(m, min_group.max(2));
    if groups.is_empty() {
        return Err(TrialError::NoEligibleGroup { min_group });
    }
    let pools: Vec<Pool> = groups
        .values()
        .map(|speakers| Pool {
            speakers: speakers.iter().map(|u| u.iter().map(String::as_str).collect()).collect(),
        })
        .collect();
    let multis: Vec<Vec<usize>> = pools.iter().map(Pool::multi).collect();
    let all = WeightedIndex::new(pools.iter().map(|p| p.speakers.len())).expect("nonempty groups");
    let with_targets: Vec<usize> = (0..pools.len()).filter(|&g| !multis[g].is_empty()).collect();
    if with_targets.is_empty() {
        return Err(TrialError::Infeasible("no eligible speaker has 2 utterances".into()));
    }
    let targetable =
        WeightedIndex::new(with_targets.iter().map(|&g| pools[g].speakers.len())).expect("nonempty groups");
    let mut seen = HashSet::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    for target in balanced_labels(n_pairs, rng) {
        let p = if target {
            draw_unique(&mut seen, || {
                let g = with_targets[targetable.sample(rng)];
                pools[g].target(&multis[g], rng)
            })?
        } else {
            draw_unique(&mut seen, || pools[all.sample(rng)].nontarget(rng))?
        };
        pairs.push(trial(target, p));
    }
    Ok(TrialList {
        name: "hard".into(),
        pairs,
        fingerprint: format!("hard seed={seed} n_pairs={n_pairs} min_group={min_group}"),
    })
}
