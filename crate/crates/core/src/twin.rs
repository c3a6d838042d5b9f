//! Twin generators producing pairs of comparable but different scripts.
//!
//! Two generators share one discriminator. Quality comes from the usual
//! adversarial updates; difference comes from pushing the cross-entropy
//! between the two output vectors towards a target `ψ`.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assess::{assess_script, ExamScript, QualityReport, TargetDistribution};
use crate::data::Course;
use crate::error::{Error, Result};
use crate::gan::{
    discriminator_step_against, gen_forward, generator_step, sample_noise, top_n,
    train_examgan, Discriminator, GanConfig, Generator,
};
use crate::neural::{load_checkpoint, save_checkpoint, sgd_update, Direction};
use crate::seeding::{Condition, TrainingInstance};

pub const H_EPSILON: f64 = 1e-9;

/// `(|A ∪ B| − |A ∩ B|) / |A ∪ B|`.
pub fn jaccard_distance(a: &ExamScript, b: &ExamScript) -> Result<f64> {
    let (shared, union) = shared_and_union(a, b);
    if union == 0 {
        return Err(Error::Invalid("Jaccard distance of two empty scripts".into()));
    }
    Ok((union - shared) as f64 / union as f64)
}

/// `|A ∩ B| / |A ∪ B|`; zero for two empty scripts.
pub fn overlap_ratio(a: &ExamScript, b: &ExamScript) -> f64 {
    let (shared, union) = shared_and_union(a, b);
    if union == 0 {
        0.0
    } else {
        shared as f64 / union as f64
    }
}

fn shared_and_union(a: &ExamScript, b: &ExamScript) -> (usize, usize) {
    // Both question lists are sorted.
    let (qa, qb) = (a.questions(), b.questions());
    let (mut i, mut j, mut shared) = (0, 0, 0);
    while i < qa.len() && j < qb.len() {
        match qa[i].cmp(&qb[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    (shared, qa.len() + qb.len() - shared)
}

/// True when the scripts share at most `threshold` of their union.
pub fn overlap_stop_check(a: &ExamScript, b: &ExamScript, threshold: f64) -> bool {
    overlap_ratio(a, b) <= threshold
}

fn floored(v: &[f64]) -> (Vec<f64>, f64) {
    let f: Vec<f64> = v.iter().map(|&x| x.max(H_EPSILON)).collect();
    let s = f.iter().sum();
    (f, s)
}

/// Floors at `ε` and divides by the sum.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let (f, s) = floored(v);
    f.into_iter().map(|x| x / s).collect()
}

/// `−Σ â log b̂` over the normalized vectors.
pub fn cross_entropy_h(v_a: &[f64], v_b: &[f64]) -> f64 {
    let a = normalize(v_a);
    let b = normalize(v_b);
    -a.iter().zip(&b).map(|(p, q)| p * q.ln()).sum::<f64>()
}

pub fn entropy(v: &[f64]) -> f64 {
    cross_entropy_h(v, v)
}

pub fn twin_loss(v_a: &[f64], v_b: &[f64], psi: f64) -> f64 {
    (psi - cross_entropy_h(v_a, v_b)).abs()
}

/// `(∂H/∂v_a, ∂H/∂v_b)`. Entries clamped by the floor get zero gradient.
pub fn cross_entropy_grads(v_a: &[f64], v_b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (fa, sa) = floored(v_a);
    let (fb, sb) = floored(v_b);
    let h = cross_entropy_h(v_a, v_b);
    let ga = v_a
        .iter()
        .zip(&fb)
        .map(|(&a, &b)| {
            if a < H_EPSILON {
                0.0
            } else {
                (-(b / sb).ln() - h) / sa
            }
        })
        .collect();
    let gb = v_b
        .iter()
        .zip(&fa)
        .zip(&fb)
        .map(|((&b, &a), &bf)| {
            if b < H_EPSILON {
                0.0
            } else {
                -(a / sa) / bf + 1.0 / sb
            }
        })
        .collect();
    (ga, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Individual quality first (alternating difference step per round).
    S1,
    /// Difference first (difference steps until the overlap check passes).
    S2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinConfig {
    pub gan: GanConfig,
    /// Epochs of plain adversarial training for each generator before the
    /// twin rounds start.
    pub pretrain_epochs: usize,
    /// Step size of a difference update.
    pub lambda: f64,
    /// Outer rounds.
    pub gamma: usize,
    pub overlap_threshold: f64,
    /// Fixed `ψ`; when absent it is calibrated from generator A.
    pub psi: Option<f64>,
    pub psi_scale: f64,
    /// Script size used by the overlap check.
    pub n: usize,
    /// Cap on consecutive difference updates in one S2 round.
    pub difference_step_cap: usize,
    /// Adversarial epochs per S1 round.
    pub s1_epochs_per_round: usize,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            gan: GanConfig::default(),
            pretrain_epochs: 500,
            lambda: 0.001,
            gamma: 50,
            overlap_threshold: 0.3,
            psi: None,
            psi_scale: 1.5,
            n: 40,
            difference_step_cap: 200,
            s1_epochs_per_round: 1,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        if !(self.lambda > 0.0) {
            return Err(Error::Invalid("twin lambda must be positive".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return Err(Error::Invalid("overlap threshold must be in (0, 1)".into()));
        }
        if self.n == 0 {
            return Err(Error::Invalid("script size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub difference_steps: usize,
    /// Mean `|ψ − H|` over the round's probe conditions after the round.
    pub twin_loss: f64,
    /// Mean shared-question ratio over the probe conditions after the round.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinModel {
    pub gen_a: Generator,
    pub gen_b: Generator,
    pub disc: Discriminator,
    pub psi: f64,
    pub lambda_weight: f64,
    pub gamma: usize,
    pub overlap_threshold: f64,
    pub strategy: Strategy,
    pub trace: Vec<RoundTrace>,
}

impl TwinModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    A,
    B,
}

/// Mean twin loss over `conditions`, each with one noise draw shared by both
/// generators.
fn probe(model: &TwinModel, conditions: &[&Condition], n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loss, mut overlap) = (0.0, 0.0);
    for c in conditions {
        let z = sample_noise(model.gen_a.noise_dim, &mut rng);
        let a = gen_forward(&model.gen_a, &z, c)?;
        let b = gen_forward(&model.gen_b, &z, c)?;
        loss += twin_loss(&a, &b, model.psi);
        overlap += overlap_ratio(&top_n(&a, n)?, &top_n(&b, n)?);
    }
    let k = conditions.len().max(1) as f64;
    Ok((loss / k, overlap / k))
}

fn all_pass(
    model: &TwinModel,
    conditions: &[&Condition],
    n: usize,
    seed: u64,
) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in conditions {
        let z = sample_noise(model.gen_a.noise_dim, &mut rng);
        let a = top_n(&gen_forward(&model.gen_a, &z, c)?, n)?;
        let b = top_n(&gen_forward(&model.gen_b, &z, c)?, n)?;
        if !overlap_stop_check(&a, &b, model.overlap_threshold) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One descent step on mean `|ψ − H(V_A, V_B)|` for the scheduled generator;
/// the other is held fixed. Returns the loss before the step.
pub fn difference_update(
    model: &mut TwinModel,
    which: Which,
    conditions: &[&Condition],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let inv = 1.0 / conditions.len().max(1) as f64;
    let (moving, fixed) = match which {
        Which::A => (&model.gen_a, &model.gen_b),
        Which::B => (&model.gen_b, &model.gen_a),
    };
    let mut grads = moving.zeros_like();
    let mut loss = 0.0;
    for c in conditions {
        let z = sample_noise(moving.noise_dim, rng);
        let pass = moving.pass(&z, c, None);
        let v_moving = crate::gan::to_probability(&pass.output);
        let v_fixed = gen_forward(fixed, &z, c)?;
        let (v_a, v_b) = match which {
            Which::A => (&v_moving, &v_fixed),
            Which::B => (&v_fixed, &v_moving),
        };
        let h = cross_entropy_h(v_a, v_b);
        let l = (model.psi - h).abs();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("twin loss {l}")));
        }
        loss += l * inv;
        let sign = if h > model.psi {
            1.0
        } else if h < model.psi {
            -1.0
        } else {
            0.0
        };
        let (ga, gb) = cross_entropy_grads(v_a, v_b);
        let dh = if which == Which::A { ga } else { gb };
        let d_prob: Vec<f64> = dh.iter().map(|g| sign * g * inv).collect();
        moving.backward(&pass, &d_prob, &mut grads);
    }
    let target = match which {
        Which::A => &mut model.gen_a,
        Which::B => &mut model.gen_b,
    };
    sgd_update(target, &grads, model.lambda_weight, Direction::Descent);
    Ok(loss)
}

/// Calibrated `ψ`: `scale` times the mean entropy of generator A's output.
pub fn calibrate_psi(g: &Generator, conditions: &[&Condition], scale: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for c in conditions {
        let z = sample_noise(g.noise_dim, &mut rng);
        total += entropy(&gen_forward(g, &z, c)?);
    }
    Ok(scale * total / conditions.len().max(1) as f64)
}

/// Pretrains both generators as independent ExamGANs, keeps A's
/// discriminator, and sets `ψ`.
pub fn init_twin(
    data: &[TrainingInstance],
    bank_size: usize,
    config: &TwinConfig,
    strategy: Strategy,
    seed: u64,
) -> Result<TwinModel> {
    config.validate()?;
    let pre = GanConfig {
        epochs: config.pretrain_epochs,
        ..config.gan.clone()
    };
    let a = train_examgan(data, bank_size, &pre, seed)?;
    let b = train_examgan(data, bank_size, &pre, seed.wrapping_add(1))?;
    let conditions = probe_conditions(data, config.gan.batch_size);
    let psi = match config.psi {
        Some(p) => p,
        None => calibrate_psi(&a.generator, &conditions, config.psi_scale, seed)?,
    };
    Ok(TwinModel {
        gen_a: a.generator,
        gen_b: b.generator,
        disc: a.discriminator,
        psi,
        lambda_weight: config.lambda,
        gamma: config.gamma,
        overlap_threshold: config.overlap_threshold,
        strategy,
        trace: Vec::new(),
    })
}

/// Distinct conditions from the data, in order, at most `k` of them.
fn probe_conditions(data: &[TrainingInstance], k: usize) -> Vec<&Condition> {
    let mut out: Vec<&Condition> = Vec::new();
    for inst in data {
        if out.len() == k {
            break;
        }
        if out.last().is_none_or(|c| **c != inst.condition) {
            out.push(&inst.condition);
        }
    }
    out
}

fn real_batch<'a>(
    data: &'a [TrainingInstance],
    batch: &[usize],
    bank_size: usize,
) -> Vec<(&'a Condition, Vec<f64>)> {
    batch
        .iter()
        .map(|&i| (&data[i].condition, data[i].target_vector(bank_size)))
        .collect()
}

/// Discriminator loop against both generators, then one step per generator.
fn quality_round(
    model: &mut TwinModel,
    real: &[(&Condition, Vec<f64>)],
    config: &GanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut last: Option<f64> = None;
    for _ in 0..config.d_steps_per_g_step {
        let obj = discriminator_step_against(
            &mut model.disc,
            real,
            &[&model.gen_a, &model.gen_b],
            config,
            rng,
        )?;
        if let Some(prev) = last {
            if ((obj - prev) / prev.abs().max(1e-12)).abs() < config.d_convergence_tol {
                break;
            }
        }
        last = Some(obj);
    }
    let conditions: Vec<&Condition> = real.iter().map(|r| r.0).collect();
    generator_step(&mut model.gen_a, &model.disc, &conditions, config, rng)?;
    generator_step(&mut model.gen_b, &model.disc, &conditions, config, rng)?;
    Ok(())
}

/// Quality priority: each round trains both generators adversarially for
/// `s1_epochs_per_round` epochs, then applies one difference update to A on
/// even rounds and to B on odd rounds.
pub fn train_twin_s1(
    data: &[TrainingInstance],
    bank_size: usize,
    config: &TwinConfig,
    seed: u64,
) -> Result<TwinModel> {
    let mut model = init_twin(data, bank_size, config, Strategy::S1, seed)?;
    run_s1(&mut model, data, bank_size, config, seed)?;
    Ok(model)
}

pub fn run_s1(
    model: &mut TwinModel,
    data: &[TrainingInstance],
    bank_size: usize,
    config: &TwinConfig,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5131);
    let probes = probe_conditions(data, config.gan.batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for round in 0..config.gamma {
        for _ in 0..config.s1_epochs_per_round {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.gan.batch_size) {
                let real = real_batch(data, batch, bank_size);
                quality_round(model, &real, &config.gan, &mut rng)?;
            }
        }
        let which = if round % 2 == 0 { Which::A } else { Which::B };
        difference_update(model, which, &probes, &mut rng)?;
        let (twin_loss, overlap) = probe(model, &probes, config.n, seed)?;
        debug!("S1 round {round}: loss {twin_loss:.4} overlap {overlap:.3}");
        model.trace.push(RoundTrace {
            round,
            difference_steps: 1,
            twin_loss,
            overlap,
        });
    }
    Ok(())
}

/// Difference priority: each round alternates difference updates between
/// A and B until every probe pair passes the overlap check (or the step cap
/// is hit), then runs one discriminator loop and one quality step per
/// generator.
pub fn train_twin_s2(
    data: &[TrainingInstance],
    bank_size: usize,
    config: &TwinConfig,
    seed: u64,
) -> Result<TwinModel> {
    let mut model = init_twin(data, bank_size, config, Strategy::S2, seed)?;
    run_s2(&mut model, data, bank_size, config, seed)?;
    Ok(model)
}

pub fn run_s2(
    model: &mut TwinModel,
    data: &[TrainingInstance],
    bank_size: usize,
    config: &TwinConfig,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5232);
    let probes = probe_conditions(data, config.gan.batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    for round in 0..config.gamma {
        let mut steps = 0;
        while !all_pass(model, &probes, config.n, seed)? {
            if steps == config.difference_step_cap {
                warn!("S2 round {round}: overlap check still failing after {steps} difference steps");
                break;
            }
            let which = if steps % 2 == 0 { Which::A } else { Which::B };
            difference_update(model, which, &probes, &mut rng)?;
            steps += 1;
        }
        if cursor + config.gan.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.gan.batch_size).min(order.len());
        let real = real_batch(data, &order[cursor..end], bank_size);
        cursor = end;
        quality_round(model, &real, &config.gan, &mut rng)?;
        let (twin_loss, overlap) = probe(model, &probes, config.n, seed)?;
        debug!("S2 round {round}: {steps} steps, loss {twin_loss:.4} overlap {overlap:.3}");
        model.trace.push(RoundTrace {
            round,
            difference_steps: steps,
            twin_loss,
            overlap,
        });
    }
    Ok(())
}

pub fn train_twin(
    data: &[TrainingInstance],
    bank_size: usize,
    config: &TwinConfig,
    strategy: Strategy,
    seed: u64,
) -> Result<TwinModel> {
    match strategy {
        Strategy::S1 => train_twin_s1(data, bank_size, config, seed),
        Strategy::S2 => train_twin_s2(data, bank_size, config, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptPair {
    pub e_a: ExamScript,
    pub e_b: ExamScript,
    pub jaccard_distance: f64,
    pub overlap: f64,
    pub report_a: QualityReport,
    pub report_b: QualityReport,
}

/// Top-`n` from each generator under one shared noise draw, with both
/// scripts assessed for the class.
pub fn generate_pair(
    model: &TwinModel,
    c: &Condition,
    masteries: &[Vec<f64>],
    course: &Course,
    n: usize,
    target: &TargetDistribution,
    seed: u64,
) -> Result<ScriptPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_noise(model.gen_a.noise_dim, &mut rng);
    let e_a = top_n(&gen_forward(&model.gen_a, &z, c)?, n)?;
    let e_b = top_n(&gen_forward(&model.gen_b, &z, c)?, n)?;
    Ok(ScriptPair {
        jaccard_distance: jaccard_distance(&e_a, &e_b)?,
        overlap: overlap_ratio(&e_a, &e_b),
        report_a: assess_script(masteries, &e_a, course, target)?,
        report_b: assess_script(masteries, &e_b, course, target)?,
        e_a,
        e_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Parameters;

    fn script(q: &[usize]) -> ExamScript {
        ExamScript::from_sorted_unchecked(q.to_vec())
    }

    #[test]
    fn jaccard_examples() {
        let a: Vec<usize> = (0..40).collect();
        let b: Vec<usize> = (30..70).collect();
        assert_eq!(jaccard_distance(&script(&a), &script(&a)).unwrap(), 0.0);
        let c: Vec<usize> = (100..140).collect();
        assert_eq!(jaccard_distance(&script(&a), &script(&c)).unwrap(), 1.0);
        let d = jaccard_distance(&script(&a), &script(&b)).unwrap();
        assert!((d - 60.0 / 70.0).abs() < 1e-12);
        assert!(jaccard_distance(&script(&[]), &script(&[])).is_err());
    }

    #[test]
    fn overlap_check_examples() {
        let a: Vec<usize> = (0..40).collect();
        let b: Vec<usize> = (30..70).collect();
        let c: Vec<usize> = (100..140).collect();
        assert!(overlap_stop_check(&script(&a), &script(&c), 0.3));
        assert!(!overlap_stop_check(&script(&a), &script(&a), 0.3));
        assert!(overlap_stop_check(&script(&a), &script(&b), 0.3));
        assert!((overlap_ratio(&script(&a), &script(&b)) - 10.0 / 70.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let u = [0.5, 0.5];
        assert!((cross_entropy_h(&u, &u) - 2f64.ln()).abs() < 1e-12);
        let h = cross_entropy_h(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(h > 15.0 && h < -(H_EPSILON.ln()) + 1.0);
        assert_eq!(twin_loss(&u, &u, 2f64.ln()), 0.0);
        assert!((twin_loss(&u, &u, 0.0) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradients_match_differences() {
        let a = [0.2, 0.7, 0.4, 0.9, 0.1];
        let b = [0.6, 0.3, 0.8, 0.2, 0.5];
        let (ga, gb) = cross_entropy_grads(&a, &b);
        let h = 1e-6;
        for i in 0..a.len() {
            let mut p = a;
            let mut m = a;
            p[i] += h;
            m[i] -= h;
            let fd = (cross_entropy_h(&p, &b) - cross_entropy_h(&m, &b)) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-7, "a[{i}]: {fd} vs {}", ga[i]);
            let mut p = b;
            let mut m = b;
            p[i] += h;
            m[i] -= h;
            let fd = (cross_entropy_h(&a, &p) - cross_entropy_h(&a, &m)) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-7, "b[{i}]: {fd} vs {}", gb[i]);
        }
    }

    fn toy_model() -> TwinModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen_a = Generator::new(3, 4, 6, 12, &mut rng);
        let gen_b = Generator::new(3, 4, 6, 12, &mut rng);
        let disc = Discriminator::new(4, 12, 5, &mut rng);
        TwinModel {
            gen_a,
            gen_b,
            disc,
            psi: 5.0,
            lambda_weight: 0.1,
            gamma: 1,
            overlap_threshold: 0.3,
            strategy: Strategy::S1,
            trace: vec![],
        }
    }

    #[test]
    fn difference_update_touches_one_generator() {
        let c = Condition {
            values: vec![0.5, 0.1, 0.6, 0.2],
        };
        for which in [Which::A, Which::B] {
            let mut m = toy_model();
            let before = m.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            difference_update(&mut m, which, &[&c], &mut rng).unwrap();
            let (changed, kept) = match which {
                Which::A => ((&m.gen_a, &before.gen_a), (&m.gen_b, &before.gen_b)),
                Which::B => ((&m.gen_b, &before.gen_b), (&m.gen_a, &before.gen_a)),
            };
            assert_ne!(changed.0.flat_params(), changed.1.flat_params());
            assert_eq!(kept.0, kept.1);
            assert_eq!(m.disc, before.disc);
        }
    }

    #[test]
    fn identical_generators_give_identical_scripts() {
        let mut m = toy_model();
        m.gen_b = m.gen_a.clone();
        let c = Condition {
            values: vec![0.5, 0.1, 0.6, 0.2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = sample_noise(3, &mut rng);
        let a = top_n(&gen_forward(&m.gen_a, &z, &c).unwrap(), 4).unwrap();
        let b = top_n(&gen_forward(&m.gen_b, &z, &c).unwrap(), 4).unwrap();
        assert_eq!(jaccard_distance(&a, &b).unwrap(), 0.0);
    }
}
