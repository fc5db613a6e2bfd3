//! Near-duplicate removal within each speaker: utterances whose embeddings
//! lie closer than a threshold are joined into clusters (transitively) and
//! only the lexicographically smallest id of each cluster is kept.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::embed::euclidean;
use crate::manifest::Manifest;

pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum DedupError {
    #[error("embedding of `{id}` has dimension {found}, expected {expected}")]
    Dimension { id: String, expected: usize, found: usize },
    #[error("threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("no embedding for utterance `{0}`")]
    MissingEmbedding(String),
}

pub type Result<T> = std::result::Result<T, DedupError>;

#[derive(Clone, Debug, PartialEq)]
pub struct DedupReport {
    pub kept: Vec<String>,
    pub removed: Vec<String>,
    /// Each cluster is sorted; its first id is the keeper.
    pub clusters: Vec<Vec<String>>,
    pub threshold: f64,
}

impl fmt::Display for DedupReport {
    /// One line per cluster: keeper, then removed ids, tab-separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.clusters {
            writeln!(f, "{}", c.join("\t"))?;
        }
        Ok(())
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Dedups one speaker's utterances.
pub fn dedup_speaker(embeddings: &[(String, Vec<f64>)], threshold: f64) -> Result<DedupReport> {
    if !(threshold > 0.0) {
        return Err(DedupError::Threshold(threshold));
    }
    if let Some((_, first)) = embeddings.first() {
        if let Some((id, v)) = embeddings.iter().find(|(_, v)| v.len() != first.len()) {
            return Err(DedupError::Dimension {
                id: id.clone(),
                expected: first.len(),
                found: v.len(),
            });
        }
    }
    let n = embeddings.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if euclidean(&embeddings[i].1, &embeddings[j].1) < threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        components.entry(r).or_default().push(embeddings[i].0.clone());
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut clusters = Vec::new();
    for (_, mut ids) in components {
        ids.sort();
        kept.push(ids[0].clone());
        if ids.len() > 1 {
            removed.extend(ids[1..].iter().cloned());
            clusters.push(ids);
        }
    }
    kept.sort();
    removed.sort();
    clusters.sort();
    Ok(DedupReport {
        kept,
        removed,
        clusters,
        threshold,
    })
}

/// Dedups every speaker independently and returns the filtered manifest
/// with per-speaker reports (in manifest speaker order).
pub fn dedup_manifest(
    m: &Manifest,
    embeddings: &HashMap<String, Vec<f64>>,
    threshold: f64,
) -> Result<(Manifest, Vec<(String, DedupReport)>)> {
    let mut reports = Vec::new();
    let mut removed = HashSet::new();
    for (speaker, utts) in m.utterances_by_speaker() {
        let items = utts
            .iter()
            .map(|u| {
                embeddings
                    .get(&u.utterance_id)
                    .map(|e| (u.utterance_id.clone(), e.clone()))
                    .ok_or_else(|| DedupError::MissingEmbedding(u.utterance_id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = dedup_speaker(&items, threshold)?;
        removed.extend(report.removed.iter().cloned());
        reports.push((speaker.speaker_id.clone(), report));
    }
    let out = m.retain_utterances(|u| !removed.contains(&u.utterance_id));
    Ok((out, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(id: &str, v: &[f64]) -> (String, Vec<f64>) {
        (id.to_string(), v.to_vec())
    }

    #[test]
    fn chain_forms_one_cluster() {
        let items = vec![e("c", &[0.10]), e("a", &[0.0]), e("b", &[0.05]), e("d", &[0.5])];
        let r = dedup_speaker(&items, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.clusters, vec![vec!["a", "b", "c"]]);
        assert_eq!(r.kept, vec!["a", "d"]);
        assert_eq!(r.removed, vec!["b", "c"]);
        assert_eq!(r.to_string(), "a\tb\tc\n");
    }

    #[test]
    fn errors() {
        assert_eq!(dedup_speaker(&[], 0.0), Err(DedupError::Threshold(0.0)));
        let r = dedup_speaker(&[e("a", &[0.0]), e("b", &[0.0, 1.0])], 0.1);
        assert!(matches!(r, Err(DedupError::Dimension { .. })));
        assert!(dedup_speaker(&[], 0.1).unwrap().kept.is_empty());
    }
}
