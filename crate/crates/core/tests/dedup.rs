use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vexkit::dedup::*;
use vexkit::embed::euclidean;
use vexkit::manifest::*;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn nudge(rng: &mut ChaCha8Rng, v: &[f64], size: f64) -> Vec<f64> {
    let d = unit(rng, v.len());
    v.iter().zip(d).map(|(a, b)| a + size * b).collect()
}

/// Clusters by repeated relaxation of reachability, independent of the
/// union-find used in the library.
fn oracle_clusters(items: &[(String, Vec<f64>)], threshold: f64) -> BTreeSet<BTreeSet<String>> {
    let n = items.len();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if i != j && euclidean(&items[i].1, &items[j].1) < threshold && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: HashMap<usize, BTreeSet<String>> = HashMap::new();
    for (i, l) in label.into_iter().enumerate() {
        groups.entry(l).or_default().insert(items[i].0.clone());
    }
    groups.into_values().filter(|g| g.len() > 1).collect()
}

#[test]
fn planted_duplicates_are_all_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 1024;
    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    let mut emb = HashMap::new();
    let mut planted = BTreeSet::new();
    // 5 duplicate pairs spread over 3 speakers: 2 + 2 + 1
    for (s, dups) in [(0, 2), (1, 2), (2, 1)] {
        let spk = format!("spk{s}");
        speakers.push(SpeakerRecord {
            speaker_id: spk.clone(),
            gender: Gender::Unknown,
            nationality: UNKNOWN_NATIONALITY.into(),
            split: Split::Dev,
        });
        for u in 0..12 {
            let id = format!("{spk}/u{u:02}");
            emb.insert(id.clone(), unit(&mut rng, dim));
            utterances.push((id, spk.clone()));
        }
        for d in 0..dups {
            let src = emb[&format!("{spk}/u{:02}", 3 * d)].clone();
            let id = format!("{spk}/z{d}");
            emb.insert(id.clone(), nudge(&mut rng, &src, 0.04));
            planted.insert(id.clone());
            utterances.push((id, spk.clone()));
        }
    }
    let m = Manifest::new(
        speakers,
        utterances
            .into_iter()
            .map(|(id, spk)| UtteranceRecord {
                utterance_id: id.clone(),
                speaker_id: spk,
                video_id: id,
                audio_path: "a.wav".into(),
                duration_s: 5.0,
            })
            .collect(),
    )
    .unwrap();
    let (out, reports) = dedup_manifest(&m, &emb, DEFAULT_THRESHOLD).unwrap();
    let removed: BTreeSet<String> = reports.iter().flat_map(|(_, r)| r.removed.iter().cloned()).collect();
    assert_eq!(removed, planted);
    assert_eq!(out.utterances().len(), m.utterances().len() - 5);
    assert_eq!(reports.iter().map(|(_, r)| r.clusters.len()).sum::<usize>(), 5);

    let (again, second) = dedup_manifest(&out, &emb, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(again, out);
    assert!(second.iter().all(|(_, r)| r.removed.is_empty()));
}

#[test]
fn duplicates_never_cross_speakers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = unit(&mut rng, 8);
    let spk = |id: &str| SpeakerRecord {
        speaker_id: id.into(),
        gender: Gender::Male,
        nationality: "UK".into(),
        split: Split::Dev,
    };
    let utt = |id: &str, s: &str| UtteranceRecord {
        utterance_id: id.into(),
        speaker_id: s.into(),
        video_id: "v".into(),
        audio_path: "a.wav".into(),
        duration_s: 1.0,
    };
    let m = Manifest::new(vec![spk("A"), spk("B")], vec![utt("a1", "A"), utt("b1", "B"), utt("b2", "B")]).unwrap();
    let emb: HashMap<String, Vec<f64>> =
        [("a1", v.clone()), ("b1", v.clone()), ("b2", unit(&mut rng, 8))].map(|(k, v)| (k.to_string(), v)).into();
    let (out, _) = dedup_manifest(&m, &emb, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(out, m);
    let mut partial = emb.clone();
    partial.remove("b2");
    assert!(matches!(
        dedup_manifest(&m, &partial, DEFAULT_THRESHOLD),
        Err(DedupError::MissingEmbedding(id)) if id == "b2"
    ));
}

#[test]
fn chain_example() {
    // d(a,b) = d(b,c) = 0.06 but d(a,c) = 0.12: linked only through b
    let items = vec![
        ("a".to_string(), vec![0.0]),
        ("b".to_string(), vec![0.06]),
        ("c".to_string(), vec![0.12]),
        ("d".to_string(), vec![0.5]),
    ];
    let r = dedup_speaker(&items, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(r.clusters, vec![vec!["a", "b", "c"]]);
    assert_eq!(r.kept, ["a", "d"]);
    assert_eq!(r.removed, ["b", "c"]);
    assert_eq!(r.to_string(), "a\tb\tc\n");
    assert_eq!(DEFAULT_THRESHOLD, 0.1);
}

fn arb_items() -> impl Strategy<Value = Vec<(String, Vec<f64>)>> {
    prop::collection::vec(prop::collection::vec(-0.3f64..0.3, 3), 0..25).prop_map(|vs| {
        vs.into_iter()
            .enumerate()
            .map(|(i, v)| (format!("u{i:02}"), v))
            .collect()
    })
}

proptest! {
    #[test]
    fn components_match_oracle_and_invariants_hold(items in arb_items(), threshold in 0.05f64..0.4) {
        let r = dedup_speaker(&items, threshold).unwrap();
        let got: BTreeSet<BTreeSet<String>> =
            r.clusters.iter().map(|c| c.iter().cloned().collect()).collect();
        prop_assert_eq!(&got, &oracle_clusters(&items, threshold));

        let all: BTreeSet<&String> = items.iter().map(|(id, _)| id).collect();
        let kept: BTreeSet<&String> = r.kept.iter().collect();
        let removed: BTreeSet<&String> = r.removed.iter().collect();
        prop_assert!(kept.is_disjoint(&removed));
        prop_assert_eq!(kept.union(&removed).cloned().collect::<BTreeSet<_>>(), all);
        prop_assert_eq!(r.removed.len(), r.clusters.iter().map(|c| c.len() - 1).sum::<usize>());
        for c in &r.clusters {
            prop_assert!(c.len() >= 2);
            prop_assert_eq!(c.iter().filter(|id| kept.contains(id)).count(), 1);
            prop_assert!(kept.contains(&c[0]));
        }

        let survivors: Vec<(String, Vec<f64>)> =
            items.iter().filter(|(id, _)| kept.contains(id)).cloned().collect();
        for i in 0..survivors.len() {
            for j in i + 1..survivors.len() {
                prop_assert!(euclidean(&survivors[i].1, &survivors[j].1) >= threshold);
            }
        }
        let again = dedup_speaker(&survivors, threshold).unwrap();
        prop_assert!(again.removed.is_empty());
    }
}
