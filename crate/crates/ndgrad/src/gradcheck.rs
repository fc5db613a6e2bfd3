//! Central finite-difference gradient checks, with a fixed suite of random
//! shapes for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{BnMode, PoolGeom, Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Builds the graph under test from its input variables.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Scalarizes `out` by a fixed projection unless it already is a scalar.
fn objective(tape: &mut Tape, out: Var, proj: &Tensor) -> Var {
    let n = tape.value(out).len();
    if n == 1 {
        return out;
    }
    let flat = tape.reshape(out, &[1, n]).expect("flatten");
    let w = tape.constant(proj.clone().reshape(&[1, n]).expect("projection shape"));
    tape.linear(flat, w, None).expect("projection")
}

fn eval(inputs: &[Tensor], build: &Build, proj: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let l = objective(&mut tape, out, proj);
    tape.value(l).data()[0]
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` of the analytic gradient
/// of every input, against central differences of a random projection of
/// the output.
pub fn relative_errors(inputs: &[Tensor], build: &Build, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let proj = Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0..1.0));
    let l = objective(&mut tape, out, &proj);
    let grads = tape.backward(l).expect("backward");

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .input(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut probe = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let plus = eval(&probe, build, &proj);
            probe[k].data_mut()[i] = x - STEP;
            let minus = eval(&probe, build, &proj);
            probe[k].data_mut()[i] = x;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .l2_norm()
            .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-10);
        errors.push(diff / scale);
    }
    errors
}

/// Outcome of one suite case.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub op: &'static str,
    pub shape: Vec<usize>,
    /// Worst relative error over the case's inputs.
    pub error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error < TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn run(out: &mut Vec<CaseResult>, op: &'static str, inputs: Vec<Tensor>, build: &Build, seed: u64) {
    let shape = inputs[0].shape().to_vec();
    let error = relative_errors(&inputs, build, seed).into_iter().fold(0.0, f64::max);
    out.push(CaseResult { op, shape, error });
}

/// Five random shapes each for conv2d, batchnorm (train and eval), relu,
/// max and average pooling, linear, softmax cross-entropy, contrastive
/// loss and l2 normalization.
pub fn op_suite() -> Vec<CaseResult> {
    let mut out = Vec::new();

    let conv = [
        ([1, 1, 5, 5], [2, 1, 3, 3], (1, 1), (0, 0)),
        ([2, 2, 6, 5], [3, 2, 3, 3], (2, 2), (1, 1)),
        ([1, 3, 7, 4], [2, 3, 5, 1], (1, 1), (2, 0)),
        ([2, 2, 4, 4], [3, 2, 1, 1], (1, 1), (0, 0)),
        ([1, 2, 8, 6], [2, 2, 7, 3], (2, 1), (3, 1)),
    ];
    for (seed, (xs, ws, stride, pad)) in conv.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let inputs = vec![random(&xs, &mut rng), random(&ws, &mut rng), random(&[ws[0]], &mut rng)];
        let build = move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).expect("conv2d");
        run(&mut out, "conv2d", inputs, &build, seed as u64);
    }

    let bn: [&[usize]; 5] = [&[4, 2, 3, 3], &[2, 3, 2, 5], &[6, 1, 1, 4], &[5, 4], &[3, 2, 4, 1]];
    for (seed, shape) in bn.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let c = shape[1];
        let inputs = vec![
            Tensor::from_fn(shape, |_| rng.gen_range(-2.0..3.0)),
            Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)),
            random(&[c], &mut rng),
        ];
        let train = |t: &mut Tape, v: &[Var]| t.batchnorm(v[0], v[1], v[2], BnMode::Train).expect("batchnorm").0;
        run(&mut out, "batchnorm/train", inputs.clone(), &train, seed as u64);
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        let eval_mode = move |t: &mut Tape, v: &[Var]| {
            t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })
                .expect("batchnorm")
                .0
        };
        run(&mut out, "batchnorm/eval", inputs, &eval_mode, seed as u64);
    }

    let relu: [&[usize]; 5] = [&[7], &[2, 3], &[1, 2, 3, 4], &[3, 1, 5, 2], &[10, 2]];
    for (seed, shape) in relu.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed as u64);
        run(&mut out, "relu", vec![random(shape, &mut rng)], &|t: &mut Tape, v: &[Var]| t.relu(v[0]), seed as u64);
    }

    let pools = [
        ([1, 1, 7, 7], (3, 3), (2, 2), (1, 1)),
        ([2, 2, 6, 5], (2, 2), (2, 2), (0, 0)),
        ([1, 3, 9, 8], (5, 3), (3, 2), (0, 0)),
        ([2, 1, 4, 9], (3, 3), (1, 1), (1, 1)),
        ([1, 2, 5, 5], (5, 5), (1, 1), (0, 0)),
    ];
    for (seed, (xs, k, s, p)) in pools.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed as u64);
        let inputs = vec![random(&xs, &mut rng)];
        let maxp = move |t: &mut Tape, v: &[Var]| t.maxpool2d(v[0], PoolGeom::new(k, s, p)).expect("maxpool2d");
        run(&mut out, "maxpool2d", inputs.clone(), &maxp, seed as u64);
        let avgp = move |t: &mut Tape, v: &[Var]| t.avgpool2d(v[0], k, s).expect("avgpool2d");
        run(&mut out, "avgpool2d", inputs, &avgp, seed as u64);
    }

    for (seed, (n, d, k)) in [(1, 3, 2), (4, 5, 3), (2, 1, 6), (3, 7, 7), (5, 2, 1)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed as u64);
        let inputs = vec![random(&[n, d], &mut rng), random(&[k, d], &mut rng), random(&[k], &mut rng)];
        let build = |t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2])).expect("linear");
        run(&mut out, "linear", inputs, &build, seed as u64);
    }

    for (seed, (n, k)) in [(4, 7), (1, 2), (3, 10), (6, 3), (2, 5)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed as u64);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let inputs = vec![Tensor::from_fn(&[n, k], |_| rng.gen_range(-3.0..3.0))];
        let build = move |t: &mut Tape, v: &[Var]| t.softmax_xent(v[0], &labels).expect("softmax_xent");
        run(&mut out, "softmax_xent", inputs, &build, seed as u64);
    }

    for (seed, (n, d)) in [(4, 3), (6, 2), (2, 5), (8, 4), (5, 6)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed as u64);
        let emb = Tensor::from_fn(&[n, d], |_| rng.gen_range(-0.6..0.6));
        let pairs: Vec<(usize, usize, bool)> = (0..n)
            .map(|i| (i, (i + 1 + rng.gen_range(0..n - 1)) % n, rng.gen_bool(0.5)))
            .collect();
        let build = move |t: &mut Tape, v: &[Var]| t.contrastive(v[0], &pairs, 1.2).expect("contrastive");
        run(&mut out, "contrastive", vec![emb], &build, seed as u64);
    }

    for (seed, (n, d)) in [(1, 3), (3, 4), (2, 8), (5, 2), (4, 6)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed as u64);
        let build = |t: &mut Tape, v: &[Var]| t.l2_normalize(v[0]).expect("l2_normalize");
        run(&mut out, "l2_normalize", vec![random(&[n, d], &mut rng)], &build, seed as u64);
    }
    out
}
