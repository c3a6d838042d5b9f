use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scriptgen_core::gan::{sample_noise, to_probability, Discriminator, Generator};
use scriptgen_core::gradcheck::{check_bptt, check_dense, check_lstm_step};
use scriptgen_core::neural::{Activation, Parameters};
use scriptgen_core::seeding::Condition;

const TOL: f64 = 1e-4;

#[test]
fn dense_backward_matches_differences() {
    for (i, act) in [Activation::Sigmoid, Activation::Tanh, Activation::Identity]
        .into_iter()
        .enumerate()
    {
        let r = check_dense(act, 7, 5, 100, i as u64);
        assert_eq!(r.probes, 100);
        assert!(r.max_rel_error < TOL, "{act:?}: {} at {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn lstm_step_backward_matches_differences() {
    let r = check_lstm_step(6, 5, 100, 11);
    assert!(r.max_rel_error < TOL, "{} at {}", r.max_rel_error, r.worst);
}

#[test]
fn bptt_matches_differences() {
    let r = check_bptt(6, 5, 4, 7, 100, 12);
    assert!(r.max_rel_error < TOL, "{} at {}", r.max_rel_error, r.worst);
}

/// Generator parameters under `L = log D(c ⊕ G(z, c))`, through the frozen
/// discriminator, without dropout.
#[test]
fn generator_gradient_through_discriminator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Generator::new(3, 4, 6, 9, &mut rng);
    let d = Discriminator::new(4, 9, 5, &mut rng);
    let c = Condition {
        values: vec![0.3, 0.1, 0.8, 0.2],
    };
    let z = sample_noise(3, &mut rng);
    let objective = |g: &Generator| {
        let v = to_probability(&g.pass(&z, &c, None).output);
        d.pass(&c, &v, None).output[0].ln()
    };
    let gp = g.pass(&z, &c, None);
    let v = to_probability(&gp.output);
    let dp = d.pass(&c, &v, None);
    let mut scratch = d.zeros_like();
    let d_in = d.backward(&dp, 1.0 / dp.output[0], &mut scratch);
    let mut grads = g.zeros_like();
    g.backward(&gp, &d_in[4..], &mut grads);
    let analytic = grads.flat_params();
    let h = 1e-5;
    for i in (0..analytic.len()).step_by(7) {
        let mut plus = g.clone();
        let mut minus = g.clone();
        nudge(&mut plus, i, h);
        nudge(&mut minus, i, -h);
        let num = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
        assert!(err < TOL, "param {i}: {num} vs {}", analytic[i]);
    }
}

fn nudge<P: Parameters>(p: &mut P, mut i: usize, by: f64) {
    for s in p.param_slices_mut() {
        if i < s.len() {
            s[i] += by;
            return;
        }
        i -= s.len();
    }
}
