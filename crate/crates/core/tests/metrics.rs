use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vexkit::metrics::*;

/// Error rates at `theta` by direct counting (accept iff distance <= theta).
fn count_at(scores: &[(f64, bool)], theta: f64) -> (f64, f64) {
    let nt = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.len() as f64 - nt;
    let miss = scores.iter().filter(|&&(d, t)| t && d > theta).count() as f64;
    let fa = scores.iter().filter(|&&(d, t)| !t && d <= theta).count() as f64;
    (miss / nt, fa / nn)
}

/// Oracle thresholds: -inf, every midpoint between distinct scores, +inf.
fn oracle_thresholds(scores: &[(f64, bool)]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut th = vec![f64::NEG_INFINITY];
    th.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    th.push(f64::INFINITY);
    th
}

fn oracle_eer(scores: &[(f64, bool)]) -> f64 {
    let pts: Vec<(f64, f64)> = oracle_thresholds(scores).iter().map(|&t| count_at(scores, t)).collect();
    for i in 0..pts.len() - 1 {
        let da = pts[i].0 - pts[i].1;
        let db = pts[i + 1].0 - pts[i + 1].1;
        if da == 0.0 {
            return pts[i].0;
        }
        if da > 0.0 && db <= 0.0 {
            return pts[i].0 + da / (da - db) * (pts[i + 1].0 - pts[i].0);
        }
    }
    panic!("no crossing");
}

fn oracle_min_cdet(scores: &[(f64, bool)], c: &CostParams) -> f64 {
    oracle_thresholds(scores)
        .iter()
        .map(|&t| {
            let (m, f) = count_at(scores, t);
            c.c_miss * m * c.p_target + c.c_fa * f * (1.0 - c.p_target)
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_set(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.gen_range(2..=1000);
    // coarse grid so ties occur
    let levels = rng.gen_range(2..200) as f64;
    let mut v: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let target = rng.gen_bool(0.3);
            let shift = if target { 0.0 } else { rng.gen_range(0.0..0.5) };
            (((rng.gen::<f64>() + shift) * levels).floor() / levels, target)
        })
        .collect();
    v[0].1 = true;
    v[1].1 = false;
    v
}

#[test]
fn hundred_random_sets_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cost = CostParams::default();
    for case in 0..100 {
        let scores = random_set(&mut rng);
        let s = ScoreSet::new(scores.clone()).unwrap();
        let det = det_curve(&s);
        let th = oracle_thresholds(&scores);
        assert_eq!(det.len(), th.len(), "case {case}");
        for (p, &t) in det.iter().zip(&th) {
            assert_eq!(p.threshold, t);
            let (m, f) = count_at(&scores, t);
            assert!((p.p_miss - m).abs() <= 1e-12 && (p.p_fa - f).abs() <= 1e-12, "case {case}");
        }
        assert!((eer(&s) - oracle_eer(&scores)).abs() <= 1e-12, "case {case}");
        let mc = min_cdet(&s, &cost).unwrap();
        assert!((mc - oracle_min_cdet(&scores, &cost)).abs() <= 1e-12, "case {case}");
    }
}

#[test]
fn det_points_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let s = ScoreSet::new(random_set(&mut rng)).unwrap();
        let det = det_curve(&s);
        assert!(det.windows(2).all(|w| w[1].p_miss <= w[0].p_miss && w[1].p_fa >= w[0].p_fa));
        assert_eq!((det[0].p_miss, det[0].p_fa), (1.0, 0.0));
        let last = det.last().unwrap();
        assert_eq!((last.p_miss, last.p_fa), (0.0, 1.0));
    }
}

#[test]
fn spot_values() {
    let c = CostParams::default();
    assert_eq!(cdet(0.05, 0.05, &c), 0.05);
    assert_eq!(cdet(1.0, 0.0, &c), 0.01);

    let separated = ScoreSet::from_parts(&[0.1], &[0.9]).unwrap();
    assert_eq!(count_at(separated.scores(), 0.5), (0.0, 0.0));
    assert_eq!(cdet_at(&separated, 0.5, &c), 0.0);
    assert_eq!(eer(&separated), 0.0);
    assert_eq!(min_cdet(&separated, &c).unwrap(), 0.0);

    // the sweep visits (1,0) (0.5,0) (0.5,0.5) (0,0.5) (0,1); p_miss - p_fa
    // first reaches zero exactly at (0.5, 0.5), so nothing is interpolated
    let golden = ScoreSet::from_parts(&[0.2, 0.4], &[0.3, 0.5]).unwrap();
    assert_eq!(eer(&golden), oracle_eer(golden.scores()));
    assert_eq!(eer(&golden), 0.5);
}

#[test]
fn chance_level_scores_give_half_eer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scores: Vec<(f64, bool)> = (0..20_000).map(|_| (rng.gen(), rng.gen_bool(0.5))).collect();
    let e = eer(&ScoreSet::new(scores).unwrap());
    assert!((e - 0.5).abs() < 0.02, "{e}");
}

#[test]
fn degenerate_sets_are_rejected() {
    assert!(ScoreSet::from_parts(&[0.1, 0.2], &[]).is_err());
    assert!(ScoreSet::from_parts(&[], &[0.1]).is_err());
    assert!(ScoreSet::from_parts(&[f64::NAN], &[0.1]).is_err());
}

fn arb_scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-50.0f64..50.0, any::<bool>()), 2..300).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v
    })
}

proptest! {
    #[test]
    fn monotone_transform_leaves_metrics_unchanged(scores in arb_scores(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let c = CostParams::default();
        let s = ScoreSet::new(scores.clone()).unwrap();
        let t = ScoreSet::new(scores.iter().map(|&(d, l)| ((a * d + b).tanh() * 0.5 + (a * d).cbrt(), l)).collect()).unwrap();
        prop_assert_eq!(eer(&s), eer(&t));
        prop_assert_eq!(min_cdet(&s, &c).unwrap(), min_cdet(&t, &c).unwrap());
    }

    #[test]
    fn min_cdet_within_trivial_envelope(scores in arb_scores(), p in 0.001f64..0.999, cm in 0.0f64..10.0, cf in 0.0f64..10.0) {
        let c = CostParams { p_target: p, c_miss: cm, c_fa: cf };
        let s = ScoreSet::new(scores).unwrap();
        let m = min_cdet(&s, &c).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert!(m <= p.min(1.0 - p) * cm.max(cf) + 1e-15);
        prop_assert!(m <= c.default_cost() + 1e-15);
    }

    #[test]
    fn eer_is_a_rate(scores in arb_scores()) {
        let e = eer(&ScoreSet::new(scores).unwrap());
        prop_assert!((0.0..=1.0).contains(&e));
    }
}
