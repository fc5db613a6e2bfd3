//! Central finite-difference checks of every differentiable op.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vexkit_ndgrad::gradcheck::{op_suite, relative_errors, Build, TOLERANCE};
use vexkit_ndgrad::{BnMode, Tape, Tensor, Var};

fn check(name: &str, inputs: Vec<Tensor>, build: &Build, seed: u64) {
    for (k, e) in relative_errors(&inputs, build, seed).into_iter().enumerate() {
        assert!(e < TOLERANCE, "{name} input {k}: relative error {e:e}");
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn every_op_passes_on_five_shapes() {
    let results = op_suite();
    let mut per_op: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &results {
        assert!(r.passed(), "{} {:?}: relative error {:e}", r.op, r.shape, r.error);
        *per_op.entry(r.op).or_default() += 1;
    }
    let ops = [
        "avgpool2d",
        "batchnorm/eval",
        "batchnorm/train",
        "contrastive",
        "conv2d",
        "l2_normalize",
        "linear",
        "maxpool2d",
        "relu",
        "softmax_xent",
    ];
    assert_eq!(per_op.keys().copied().collect::<Vec<_>>(), ops);
    assert!(per_op.values().all(|&n| n >= 5));
}

#[test]
fn mismatched_gradients_are_caught() {
    // the harness itself must flag a wrong backward: adding a detached copy
    // doubles the true sensitivity but not the analytic gradient
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 4], &mut rng);
    let detached = |t: &mut Tape, v: &[Var]| {
        let copy = t.value(v[0]).clone();
        let c = t.constant(copy);
        t.add(v[0], c).unwrap()
    };
    let e = relative_errors(&[x], &detached, 1)[0];
    assert!(e > 0.1, "{e}");
}

#[test]
fn l2_normalize_into_contrastive() {
    for (seed, (n, d)) in [(3, 4), (2, 8), (5, 2), (4, 6)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed as u64);
        let inputs = vec![random(&[n, d], &mut rng)];
        let pairs: Vec<(usize, usize, bool)> = (0..n).map(|i| (i, (i + 1) % n, i % 2 == 0)).collect();
        let composed = move |t: &mut Tape, v: &[Var]| {
            let e = t.l2_normalize(v[0]).unwrap();
            t.contrastive(e, &pairs, 0.5).unwrap()
        };
        check("l2_normalize+contrastive", inputs, &composed, seed as u64);
    }
}

#[test]
fn residual_block_gradients() {
    // conv -> bn -> relu -> conv + skip, the shape the trunks are built from
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let inputs = vec![
        random(&[2, 2, 5, 4], &mut rng),
        random(&[2, 2, 3, 3], &mut rng),
        Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5)),
        random(&[2], &mut rng),
        random(&[2, 2, 3, 3], &mut rng),
    ];
    let build = |t: &mut Tape, v: &[Var]| {
        let h = t.conv2d(v[0], v[1], None, (1, 1), (1, 1)).unwrap();
        let (h, _) = t.batchnorm(h, v[2], v[3], BnMode::Train).unwrap();
        let h = t.relu(h);
        let h = t.conv2d(h, v[4], None, (1, 1), (1, 1)).unwrap();
        t.add(h, v[0]).unwrap()
    };
    check("residual", inputs, &build, 800);
}
