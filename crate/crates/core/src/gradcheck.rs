//! Central finite-difference checks for the hand-written backward passes.
//!
//! Each check builds a random network and a random scalar objective, then
//! compares analytic partial derivatives against `(f(θ+h) − f(θ−h)) / 2h` at
//! randomly chosen coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::neural::{lstm_bptt, Activation, DenseLayer, LstmCell, Parameters, StepTarget};

const STEP: f64 = 1e-5;
/// Errors are relative to `max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_error: f64,
    /// Description of the probe with the largest error.
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            probes: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        self.probes += 1;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn flat_get<P: Parameters>(p: &P, i: usize) -> f64 {
    p.flat_params()[i]
}

fn flat_set<P: Parameters>(p: &mut P, mut i: usize, v: f64) {
    for s in p.param_slices_mut() {
        if i < s.len() {
            s[i] = v;
            return;
        }
        i -= s.len();
    }
    panic!("parameter index out of range");
}

fn central<P: Parameters + Clone>(p: &P, i: usize, f: impl Fn(&P) -> f64) -> f64 {
    let x = flat_get(p, i);
    let mut plus = p.clone();
    flat_set(&mut plus, i, x + STEP);
    let mut minus = p.clone();
    flat_set(&mut minus, i, x - STEP);
    (f(&plus) - f(&minus)) / (2.0 * STEP)
}

fn central_vec(x: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += STEP;
    let mut minus = x.to_vec();
    minus[i] -= STEP;
    (f(&plus) - f(&minus)) / (2.0 * STEP)
}

/// Dense layer under `L = w · forward(x)`; probes land on weights, biases and
/// inputs alike.
pub fn check_dense(
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
    probes: usize,
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = DenseLayer::new(input_dim, output_dim, activation, &mut rng);
    let x = random_vec(input_dim, &mut rng);
    let w = random_vec(output_dim, &mut rng);
    let objective = |l: &DenseLayer, x: &[f64]| -> f64 {
        l.forward(x).expect("dims").iter().zip(&w).map(|(y, a)| y * a).sum()
    };
    let grads = layer.backward(&x, &w).expect("dims");
    let analytic = grads.layer.flat_params();
    let n_params = analytic.len();
    let mut out = GradCheck::new();
    for _ in 0..probes {
        let i = rng.random_range(0..n_params + input_dim);
        if i < n_params {
            let num = central(&layer, i, |l| objective(l, &x));
            out.record(analytic[i], num, || format!("dense param {i}"));
        } else {
            let j = i - n_params;
            let num = central_vec(&x, j, |x| objective(&layer, x));
            out.record(grads.input[j], num, || format!("dense input {j}"));
        }
    }
    out
}

/// One LSTM step under `L = a · h + b · c`; probes cover parameters, the
/// input and both previous states.
pub fn check_lstm_step(input_dim: usize, hidden: usize, probes: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = LstmCell::new(input_dim, hidden, &mut rng);
    let x = random_vec(input_dim, &mut rng);
    let h0 = random_vec(hidden, &mut rng);
    let c0 = random_vec(hidden, &mut rng);
    let a = random_vec(hidden, &mut rng);
    let b = random_vec(hidden, &mut rng);
    let objective = |cell: &LstmCell, x: &[f64], h0: &[f64], c0: &[f64]| -> f64 {
        let cache = cell.step(x, h0, c0).expect("dims");
        let h = cache.h();
        h.iter().zip(&a).map(|(u, v)| u * v).sum::<f64>()
            + cache.c.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>()
    };
    let cache = cell.step(&x, &h0, &c0).expect("dims");
    let mut acc = cell.zeros_like();
    let g = cell.step_backward(&cache, &a, &b, &mut acc);
    let analytic = acc.flat_params();
    let n_params = analytic.len();
    let mut out = GradCheck::new();
    for _ in 0..probes {
        let i = rng.random_range(0..n_params + input_dim + 2 * hidden);
        if i < n_params {
            let num = central(&cell, i, |c| objective(c, &x, &h0, &c0));
            out.record(analytic[i], num, || format!("lstm param {i}"));
        } else if i < n_params + input_dim {
            let j = i - n_params;
            let num = central_vec(&x, j, |x| objective(&cell, x, &h0, &c0));
            out.record(g.x[j], num, || format!("lstm input {j}"));
        } else if i < n_params + input_dim + hidden {
            let j = i - n_params - input_dim;
            let num = central_vec(&h0, j, |h| objective(&cell, &x, h, &c0));
            out.record(g.h_prev[j], num, || format!("lstm h_prev {j}"));
        } else {
            let j = i - n_params - input_dim - hidden;
            let num = central_vec(&c0, j, |c| objective(&cell, &x, &h0, c));
            out.record(g.c_prev[j], num, || format!("lstm c_prev {j}"));
        }
    }
    out
}

/// Full sequence loss with masked steps; probes cover the cell and the
/// sigmoid readout.
pub fn check_bptt(
    input_dim: usize,
    hidden: usize,
    outputs: usize,
    steps: usize,
    probes: usize,
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = LstmCell::new(input_dim, hidden, &mut rng);
    let readout = DenseLayer::new(hidden, outputs, Activation::Sigmoid, &mut rng);
    let inputs: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(input_dim, &mut rng)).collect();
    let targets: Vec<Option<StepTarget>> = (0..steps)
        .map(|_| {
            rng.random_bool(0.75).then(|| {
                let k = rng.random_range(1..=outputs.min(3));
                let mut outs: Vec<usize> = (0..k).map(|_| rng.random_range(0..outputs)).collect();
                outs.sort_unstable();
                outs.dedup();
                StepTarget {
                    outputs: outs,
                    label: rng.random(),
                }
            })
        })
        .collect();
    let grads = lstm_bptt(&cell, &readout, &inputs, &targets).expect("valid sequence");
    let cell_analytic = grads.cell.flat_params();
    let readout_analytic = grads.readout.flat_params();
    let mut out = GradCheck::new();
    for _ in 0..probes {
        let i = rng.random_range(0..cell_analytic.len() + readout_analytic.len());
        if i < cell_analytic.len() {
            let num = central(&cell, i, |c| lstm_bptt(c, &readout, &inputs, &targets).expect("valid").loss);
            out.record(cell_analytic[i], num, || format!("bptt cell param {i}"));
        } else {
            let j = i - cell_analytic.len();
            let num = central(&readout, j, |r| lstm_bptt(&cell, r, &inputs, &targets).expect("valid").loss);
            out.record(readout_analytic[j], num, || format!("bptt readout param {j}"));
        }
    }
    out
}
