use std::collections::HashSet;

use proptest::prelude::*;
use vexkit::manifest::*;

const FIXTURE: &str = "vexkit-manifest v1
S\tid001\tmale\tUSA\tdev
S\tid002\tfemale\tUK\tdev
S\tid003\tunknown\tunknown\ttest
U\tid001/a/1\tid001\ta\twav/1.wav\t4.5
U\tid001/a/2\tid001\ta\twav/2.wav\t5.5
U\tid002/b/1\tid002\tb\twav/3.wav\t6
U\tid002/c/1\tid002\tc\twav/4.wav\t8
U\tid003/d/1\tid003\td\twav/5.wav\t3
U\tid003/d/2\tid003\td\twav/6.wav\t3
";

#[test]
fn hand_built_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    std::fs::write(&path, FIXTURE).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!((m.speakers().len(), m.utterances().len()), (3, 6));
    let s = manifest_stats(&m);
    assert_eq!((s.pois, s.male_pois, s.videos, s.utterances), (3, 1, 4, 6));
    assert!((s.total_seconds - 30.0).abs() < 1e-12);
    assert!((s.avg_utterance_s - 5.0).abs() < 1e-12);
    assert!((s.avg_utterances_per_poi - 2.0).abs() < 1e-12);
    assert_eq!(m.speaker_of("id002/c/1").unwrap().nationality, "UK");
    assert_eq!(m.ids_in_split(Split::Test).into_iter().collect::<Vec<_>>(), ["id003"]);
}

#[test]
fn disjointness_against_dev_ids() {
    let m = Manifest::parse(FIXTURE).unwrap();
    let dev: HashSet<String> = m.ids_in_split(Split::Dev).into_iter().collect();
    assert_eq!(check_disjoint(&m, &dev), ["id001", "id002"]);
    let test: HashSet<String> = m.ids_in_split(Split::Test).into_iter().collect();
    assert!(check_disjoint(&m, &test).is_empty());
    assert!(check_disjoint(&m, &HashSet::new()).is_empty());
}

/// Distributes `total` items over `bins` as evenly as possible.
fn spread(total: usize, bins: usize) -> impl Iterator<Item = usize> {
    (0..bins).map(move |i| total / bins + usize::from(i < total % bins))
}

/// A synthetic catalog built to the published counts: per split, POIs,
/// videos and utterances, plus the male count and total duration.
fn corpus_like(
    dev: (usize, usize, usize),
    test: (usize, usize, usize),
    male: usize,
    hours: f64,
) -> Manifest {
    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    let total_utts = dev.2 + test.2;
    let dur = hours * 3600.0 / total_utts as f64;
    for (split, (pois, videos, utts)) in [(Split::Dev, dev), (Split::Test, test)] {
        let base = speakers.len();
        let vids: Vec<usize> = spread(videos, pois).collect();
        let per_spk: Vec<usize> = spread(utts, pois).collect();
        for p in 0..pois {
            let id = format!("id{:05}", base + p);
            speakers.push(SpeakerRecord {
                speaker_id: id.clone(),
                gender: if base + p < male { Gender::Male } else { Gender::Female },
                nationality: UNKNOWN_NATIONALITY.into(),
                split,
            });
            for u in 0..per_spk[p] {
                let v = u % vids[p];
                utterances.push(UtteranceRecord {
                    utterance_id: format!("{id}/{v}/{u}"),
                    speaker_id: id.clone(),
                    video_id: format!("{id}/{v}"),
                    audio_path: "x.wav".into(),
                    duration_s: dur,
                });
            }
        }
    }
    Manifest::new(speakers, utterances).unwrap()
}

#[test]
fn published_corpus_counts_reproduce() {
    let m = corpus_like((5_994, 145_569, 1_092_009), (118, 4_911, 36_237), 3_761, 2_442.0);
    let s = manifest_stats(&m);
    assert_eq!(s.pois, 6_112);
    assert_eq!(s.male_pois, 3_761);
    assert_eq!(s.videos, 150_480);
    assert_eq!(s.utterances, 1_128_246);
    let text = s.to_string();
    for line in [
        "# of hours\t2442",
        "Avg # of videos per POI\t25",
        "Avg # of utterances per POI\t185",
        "Avg length of utterances (s)\t7.8",
    ] {
        assert!(text.contains(line), "missing {line:?} in\n{text}");
    }
    assert!((s.male_pois as f64 / s.pois as f64 - 0.615).abs() < 0.005);

    let dev = manifest_stats(&m.filter_split(Split::Dev));
    assert_eq!((dev.pois, dev.videos, dev.utterances), (5_994, 145_569, 1_092_009));
    let test = manifest_stats(&m.filter_split(Split::Test));
    assert_eq!((test.pois, test.videos, test.utterances), (118, 4_911, 36_237));
}

fn arb_manifest() -> impl Strategy<Value = Manifest> {
    let spk = (
        prop_oneof![Just(Gender::Male), Just(Gender::Female), Just(Gender::Unknown)],
        "[A-Za-z]{2,8}",
        any::<bool>(),
    );
    prop::collection::vec((spk, prop::collection::vec((0usize..4, 0.25f64..30.0), 0..6)), 0..8).prop_map(
        |rows| {
            let mut speakers = Vec::new();
            let mut utterances = Vec::new();
            for (i, ((gender, nat, test), utts)) in rows.into_iter().enumerate() {
                let id = format!("spk {i}");
                speakers.push(SpeakerRecord {
                    speaker_id: id.clone(),
                    gender,
                    nationality: nat,
                    split: if test { Split::Test } else { Split::Dev },
                });
                for (j, (v, d)) in utts.into_iter().enumerate() {
                    utterances.push(UtteranceRecord {
                        utterance_id: format!("{id}/{j}"),
                        speaker_id: id.clone(),
                        video_id: format!("{id}-v{v}"),
                        audio_path: format!("audio dir/{i}_{j}.wav").into(),
                        duration_s: d,
                    });
                }
            }
            Manifest::new(speakers, utterances).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn text_round_trip_is_identity(m in arb_manifest()) {
        let back = Manifest::parse(&m.to_text()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn stats_ignore_record_order(m in arb_manifest(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut spk = m.speakers().to_vec();
        let mut utt = m.utterances().to_vec();
        spk.shuffle(&mut rng);
        utt.shuffle(&mut rng);
        let shuffled = Manifest::new(spk, utt).unwrap();
        let (a, b) = (manifest_stats(&m), manifest_stats(&shuffled));
        prop_assert_eq!((a.pois, a.male_pois, a.videos, a.utterances), (b.pois, b.male_pois, b.videos, b.utterances));
        prop_assert!((a.total_seconds - b.total_seconds).abs() < 1e-9);
    }
}
