use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vexkit::manifest::*;
use vexkit::trials::*;

fn speaker(id: String, gender: Gender, nationality: &str) -> SpeakerRecord {
    SpeakerRecord {
        speaker_id: id,
        gender,
        nationality: nationality.into(),
        split: Split::Dev,
    }
}

/// Speakers with `utts` utterances each.
fn with_utterances(speakers: Vec<SpeakerRecord>, utts: impl Fn(usize) -> usize) -> Manifest {
    let mut utterances = Vec::new();
    for (i, s) in speakers.iter().enumerate() {
        for u in 0..utts(i) {
            utterances.push(UtteranceRecord {
                utterance_id: format!("{}/v{}/{u:05}", s.speaker_id, u % 7),
                speaker_id: s.speaker_id.clone(),
                video_id: format!("{}/v{}", s.speaker_id, u % 7),
                audio_path: "a.wav".into(),
                duration_s: 8.0,
            });
        }
    }
    Manifest::new(speakers, utterances).unwrap()
}

/// 1,251 speakers (690 male) and 153,516 utterances, laid out so that
/// exactly 18 (nationality, gender) groups have at least five members and
/// USA-male is the largest; the rest sit in groups of at most four or have
/// no nationality label.
fn vox1_like() -> Manifest {
    let eligible: [(&str, usize, usize); 10] = [
        ("USA", 300, 200),
        ("UK", 80, 60),
        ("Canada", 40, 30),
        ("Australia", 30, 20),
        ("India", 35, 8),
        ("Germany", 15, 10),
        ("Ireland", 12, 6),
        ("Norway", 8, 5),
        ("Italy", 10, 3),
        ("France", 7, 4),
    ];
    let mut speakers = Vec::new();
    let mut push = |g: Gender, nat: &str, n: usize| {
        for _ in 0..n {
            let id = format!("id{:05}", 10_000 + speakers.len());
            speakers.push(speaker(id, g, nat));
        }
    };
    let (mut male, mut female) = (0, 0);
    for (nat, m, f) in eligible {
        push(Gender::Male, nat, m);
        push(Gender::Female, nat, f);
        male += m;
        female += f;
    }
    let unknown = (100, 150);
    push(Gender::Male, UNKNOWN_NATIONALITY, unknown.0);
    push(Gender::Female, UNKNOWN_NATIONALITY, unknown.1);
    male += unknown.0;
    female += unknown.1;
    let mut small = 0;
    for (g, mut left) in [(Gender::Male, 690 - male), (Gender::Female, 1251 - 690 - female)] {
        while left > 0 {
            let n = left.min(4);
            push(g, &format!("Small{small}"), n);
            small += 1;
            left -= n;
        }
    }
    assert_eq!(speakers.len(), 1251);
    let total = 153_516;
    with_utterances(speakers, |i| total / 1251 + usize::from(i < total % 1251))
}

#[test]
fn full_scale_random_list() {
    let m = vox1_like();
    assert_eq!(m.utterances().len(), 153_516);
    let stats = manifest_stats(&m);
    assert_eq!((stats.pois, stats.male_pois), (1_251, 690));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let list = gen_random_trials(&m, 581_480, 1, &mut rng).unwrap();
    assert_eq!(list.len(), 581_480);
    assert_eq!(list.pairs.iter().filter(|t| t.target).count(), 290_740);
    list.verify(&m).unwrap();
    let covered: HashSet<&str> = list
        .pairs
        .iter()
        .flat_map(|t| [&t.utt_a, &t.utt_b])
        .map(|u| m.utterance(u).unwrap().speaker_id.as_str())
        .collect();
    assert_eq!(covered.len(), 1_251);
    assert_no_duplicates(&list);
}

#[test]
fn full_scale_hard_list() {
    let m = vox1_like();
    let groups = eligible_groups(&m, DEFAULT_MIN_GROUP);
    assert_eq!(groups.len(), 18);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let list = gen_hard_trials(&m, 552_536, DEFAULT_MIN_GROUP, 2, &mut rng).unwrap();
    assert_eq!(list.len(), 552_536);
    list.verify(&m).unwrap();
    let mut per_group: HashMap<(String, Gender), usize> = HashMap::new();
    for t in &list.pairs {
        let (a, b) = (m.speaker_of(&t.utt_a).unwrap(), m.speaker_of(&t.utt_b).unwrap());
        assert_eq!((&a.nationality, a.gender), (&b.nationality, b.gender));
        assert_ne!(a.nationality, UNKNOWN_NATIONALITY);
        assert!(!a.nationality.starts_with("Small"), "group under five used");
        *per_group.entry((a.nationality.clone(), a.gender)).or_default() += 1;
    }
    assert_eq!(per_group.len(), 18);
    let top = per_group.iter().max_by_key(|(_, &c)| c).unwrap().0;
    assert_eq!(top, &("USA".to_string(), Gender::Male));
    assert_no_duplicates(&list);
}

fn assert_no_duplicates(list: &TrialList) {
    let mut seen = HashSet::new();
    for t in &list.pairs {
        assert_ne!(t.utt_a, t.utt_b);
        let key = if t.utt_a <= t.utt_b { (&t.utt_a, &t.utt_b) } else { (&t.utt_b, &t.utt_a) };
        assert!(seen.insert(key), "duplicate pair {key:?}");
    }
}

fn small_manifest() -> Manifest {
    let mut speakers = Vec::new();
    for i in 0..5 {
        speakers.push(speaker(format!("a{i}"), Gender::Female, "Peru"));
    }
    for i in 0..4 {
        speakers.push(speaker(format!("b{i}"), Gender::Male, "Chile"));
    }
    with_utterances(speakers, |_| 6)
}

#[test]
fn small_split_and_single_group() {
    let m = small_manifest();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let list = gen_random_trials(&m, 10, 3, &mut rng).unwrap();
    assert_eq!(list.pairs.iter().filter(|t| t.target).count(), 5);
    let hard = gen_hard_trials(&m, 40, 5, 3, &mut rng).unwrap();
    // the four-speaker Chile group is excluded, leaving only Peru-female
    for t in &hard.pairs {
        assert!(t.utt_a.starts_with('a') && t.utt_b.starts_with('a'));
    }
    let err = gen_hard_trials(&m, 40, 6, 3, &mut rng);
    assert!(matches!(err, Err(TrialError::NoEligibleGroup { min_group: 6 })));
    assert!(eligible_groups(&m, 4).len() == 2);
}

#[test]
fn regeneration_is_byte_identical() {
    let m = small_manifest();
    let make = |hard: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        if hard {
            gen_hard_trials(&m, 30, 5, 9, &mut rng).unwrap().to_text()
        } else {
            gen_random_trials(&m, 30, 9, &mut rng).unwrap().to_text()
        }
    };
    assert_eq!(make(false), make(false));
    assert_eq!(make(true), make(true));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    assert_ne!(make(false), gen_random_trials(&m, 30, 10, &mut rng).unwrap().to_text());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("list.txt");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let list = gen_random_trials(&m, 30, 9, &mut rng).unwrap();
    save_trial_list(&list, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), make(false));
    assert_eq!(load_trial_list(&path).unwrap().pairs, list.pairs);
}

#[test]
fn infeasible_requests() {
    let one_utt = with_utterances(
        vec![speaker("x".into(), Gender::Male, "UK"), speaker("y".into(), Gender::Male, "UK")],
        |_| 1,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(gen_random_trials(&one_utt, 4, 0, &mut rng), Err(TrialError::Infeasible(_))));
    // two speakers with two utterances each admit only 2 distinct targets
    let tiny = with_utterances(
        vec![speaker("x".into(), Gender::Male, "UK"), speaker("y".into(), Gender::Male, "UK")],
        |_| 2,
    );
    assert!(matches!(gen_random_trials(&tiny, 10, 0, &mut rng), Err(TrialError::Exhausted)));
}

#[test]
fn original_style_forty_speaker_list() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/original_40_speakers.txt");
    let text = std::fs::read_to_string(path).unwrap();
    let lines = text.lines().filter(|l| !l.trim().is_empty()).count();
    let list = load_trial_list(path).unwrap();
    assert_eq!(list.len(), lines);
    assert_eq!(list.name, "original_40_speakers");
    let spk = |u: &str| u.split('/').next().unwrap().to_string();
    let speakers: HashSet<String> = list.pairs.iter().flat_map(|t| [spk(&t.utt_a), spk(&t.utt_b)]).collect();
    assert_eq!(speakers.len(), 40);
    for t in &list.pairs {
        assert_eq!(spk(&t.utt_a) == spk(&t.utt_b), t.target);
    }
    let by_label: BTreeMap<bool, usize> = list.pairs.iter().fold(BTreeMap::new(), |mut acc, t| {
        *acc.entry(t.target).or_default() += 1;
        acc
    });
    assert_eq!(by_label[&true], by_label[&false]);
}
