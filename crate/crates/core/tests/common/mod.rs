//! Finite-difference gradient oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slungload::autodiff::{concat, Tape, Tensor, Var};
use slungload::data::{generate_synthetic, make_windows, synthetic_suite, ControllerGains, DisturbanceConfig, SequenceWindow, WindowBatch};
use slungload::dynamics::graph::{step_graph, StepControls};
use slungload::dynamics::{ControlInput, PhysicalParams, SystemState};
use slungload::loss::{total_loss, LossWeights};
use slungload::seq2seq::{Model, ModelConfig, Normalizer};
use slungload::{Result, Vec3};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative, with a floor so that
/// vanishing gradients are compared in absolute terms.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error of `d f / d inputs` over every input element.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&tape, &leaves).unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, t)| grads.wrt(*l).cloned().unwrap_or_else(|| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).unwrap()))
        .collect();

    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        f(&tape, &leaves).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Reduce a matrix to a scalar with non-uniform weights so that every
/// element's gradient differs.
pub fn reduce<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let (r, c) = v.dims();
    let w = Tensor::matrix(r, c, (0..r * c).map(|k| 0.3 + 0.17 * k as f64).collect())?;
    v.mul(tape.constant(w)?)?.sum()
}

/// Worst error of every primitive, by name.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4, -1.0, 1.0);
    let b = random(&mut rng, 3, 4, -1.0, 1.0);
    let m = random(&mut rng, 4, 2, -1.0, 1.0);
    let v = random(&mut rng, 4, 1, -1.0, 1.0);
    let bias = random(&mut rng, 1, 4, -1.0, 1.0);
    let pos = random(&mut rng, 3, 4, 0.5, 2.0);

    let mut report: Vec<(&str, f64)> = Vec::new();

    report.push(("add", check(&[a.clone(), b.clone()], |t, x| reduce(t, x[0].add(x[1])?))));
    report.push(("sub", check(&[a.clone(), b.clone()], |t, x| reduce(t, x[0].sub(x[1])?))));
    report.push(("mul", check(&[a.clone(), b.clone()], |t, x| reduce(t, x[0].mul(x[1])?))));
    report.push(("scale", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].scale(-1.7)?))));
    report.push(("neg", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].neg()?))));
    report.push(("add_scalar", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].add_scalar(0.4)?.mul(x[0])?))));
    report.push(("matmul", check(&[a.clone(), m.clone()], |t, x| reduce(t, x[0].matmul(x[1])?))));
    report.push(("matvec", check(&[a.clone(), v.clone()], |t, x| reduce(t, x[0].matvec(x[1])?))));
    report.push(("add_row", check(&[a.clone(), bias.clone()], |t, x| reduce(t, x[0].add_row(x[1])?))));
    report.push(("tanh", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].tanh()?))));
    report.push(("sigmoid", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].sigmoid()?))));
    report.push(("gelu", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].gelu()?))));
    report.push(("sqrt", check(std::slice::from_ref(&pos), |t, x| reduce(t, x[0].sqrt()?))));
    report.push(("softmax rows", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].softmax(1)?))));
    report.push(("softmax cols", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].softmax(0)?))));
    report.push(("sum", check(std::slice::from_ref(&a), |_, x| x[0].mul(x[0])?.sum())));
    report.push(("sum_axis 0", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].sum_axis(0)?))));
    report.push(("sum_axis 1", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].sum_axis(1)?))));
    report.push(("weighted_sq_norm", check(std::slice::from_ref(&a), |_, x| x[0].weighted_sq_norm(0.7))));
    report.push(("slice rows", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].slice(0, 1..3)?))));
    report.push(("slice cols", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].slice(1, 1..4)?))));
    report.push(("cols", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].cols(0..2)?))));
    report.push(("col", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].col(3)?))));
    report.push(("reshape", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].reshape(6, 2)?.tanh()?))));
    report.push(("repeat_rows", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].repeat_rows(3)?.tanh()?))));
    report.push(("sum_row_groups", check(&[random(&mut rng, 6, 2, -1.0, 1.0)], |t, x| reduce(t, x[0].sum_row_groups(3)?.tanh()?))));
    report.push(("concat rows", check(&[a.clone(), b.clone()], |t, x| reduce(t, concat(&[x[0], x[1].tanh()?], 0)?))));
    report.push(("concat cols", check(&[a.clone(), m.clone()], |t, x| reduce(t, concat(&[x[0].slice(0, 0..2)?, x[1].slice(0, 0..2)?], 1)?))));
    report.push(("fan-out", check(std::slice::from_ref(&a), |t, x| reduce(t, x[0].mul(x[0])?.add(x[0].sigmoid()?)?))));

    let params = PhysicalParams::default();
    let hover = SystemState::hover(Vec3::new(0.1, -0.2, -1.0), &params);
    let mut state = hover.to_vector();
    state[3] += 0.3;
    state[10] += 0.1;
    let controls = vec![
        ControlInput::new(params.hover_thrust() * 1.1, Vec3::new(0.2, -0.1, 0.05)),
        ControlInput::new(params.hover_thrust() * 0.9, Vec3::new(-0.3, 0.4, 0.0)),
    ];
    let xs = Tensor::from_rows(&[state.to_vec(), hover.to_vector().to_vec()]).unwrap();
    let om = Tensor::from_rows(&[vec![0.2, -0.5, 0.1], vec![0.0, 0.3, -0.2]]).unwrap();
    report.push(("step_graph", check(&[xs, om], |t, x| {
        let u = StepControls::new(t, &controls, &params)?;
        let (next, omega) = step_graph(x[0], x[1], &u, &params)?;
        let (next, omega) = step_graph(next, omega, &u, &params)?;
        reduce(t, next)?.add(reduce(t, omega)?)
    })));

    report
}

pub fn loss_windows(seed: u64, history: usize, horizon: usize) -> Vec<SequenceWindow> {
    let params = PhysicalParams::default();
    let spec = &synthetic_suite(4, (80, 80), seed)[(seed % 4) as usize];
    let log = generate_synthetic(&params, &DisturbanceConfig::default(), &ControllerGains::default(), spec).unwrap();
    make_windows(&log, history, horizon, 17, &params).unwrap()
}

/// Full model and loss with the desk dimensions on short windows, checked
/// on a seeded sample of coordinates from every parameter tensor.
/// Worst error over a seeded sample of coordinates, two from every
/// parameter tensor, for `seeds` model initializations.
pub fn model_loss_error(seeds: u64) -> f64 {
    let params = PhysicalParams::default();
    let weights = LossWeights::default();
    let (history, horizon) = (6, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let cfg = ModelConfig {
            history,
            horizon,
            ..ModelConfig::desk()
        };
        let windows = loss_windows(seed, history, horizon);
        let refs: Vec<&SequenceWindow> = windows.iter().take(2).collect();
        let batch = WindowBatch::new(&refs, horizon).unwrap();
        let mut model = Model::new(cfg, seed).unwrap().with_normalizer(Normalizer::fit(&windows, true));

        let loss_of = |m: &Model| -> f64 {
            let tape = Tape::new();
            let graph = m.bind(&tape).unwrap().predict(&batch, horizon).unwrap();
            total_loss(&graph, &batch, &params, &weights).unwrap().0.item()
        };
        let analytic = {
            let tape = Tape::new();
            let graph = model.bind(&tape).unwrap().predict(&batch, horizon).unwrap();
            let (total, _) = total_loss(&graph, &batch, &params, &weights).unwrap();
            tape.backward(total).unwrap().for_params(&model.params)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for (pi, g) in analytic.iter().enumerate() {
            for _ in 0..2 {
                let j = rng.random_range(0..g.len());
                let orig = model.params.tensors_mut()[pi].data()[j];
                model.params.tensors_mut()[pi].data_mut()[j] = orig + STEP;
                let up = loss_of(&model);
                model.params.tensors_mut()[pi].data_mut()[j] = orig - STEP;
                let down = loss_of(&model);
                model.params.tensors_mut()[pi].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let e = rel_err(g.data()[j], numeric);
                worst = worst.max(e);
            }
        }
    }
    worst
}

