//! Genetic-algorithm script generation.
//!
//! An individual is a set of `n` bank questions. Fitness rewards a class
//! difficulty close to the target and KP coverage close to the bank's.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assess::{cosine_similarity, question_score, ExamScript};
use crate::data::{ClassRoster, Course};
use crate::dkt::{predict_class, DktModel};
use crate::error::{Error, Result};
use crate::seeding::RsfSampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub population: usize,
    pub generations: usize,
    pub target_difficulty: f64,
    pub difficulty_weight: f64,
    pub validity_weight: f64,
    pub tournament_size: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            crossover_rate: 0.8,
            mutation_rate: 0.003,
            population: 1000,
            generations: 100,
            target_difficulty: 0.7,
            difficulty_weight: 0.5,
            validity_weight: 0.5,
            tournament_size: 2,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Invalid("GA rates must be in [0, 1]".into()));
        }
        if self.population < 2 {
            return Err(Error::Invalid("GA population must be at least 2".into()));
        }
        if self.tournament_size == 0 {
            return Err(Error::Invalid("GA tournament size must be positive".into()));
        }
        Ok(())
    }
}

/// Precomputed per-question quantities for fast fitness evaluation.
pub struct Fitness<'a> {
    course: &'a Course,
    mean_scores: Vec<f64>,
    config: &'a GaConfig,
}

impl<'a> Fitness<'a> {
    pub fn new(masteries: &[Vec<f64>], course: &'a Course, config: &'a GaConfig) -> Result<Self> {
        if masteries.is_empty() {
            return Err(Error::InsufficientData("GA needs at least one student".into()));
        }
        let inv = 1.0 / masteries.len() as f64;
        let mean_scores = course
            .questions()
            .iter()
            .map(|q| masteries.iter().map(|m| question_score(m, q)).sum::<f64>() * inv)
            .collect();
        Ok(Self {
            course,
            mean_scores,
            config,
        })
    }

    pub fn difficulty(&self, script: &ExamScript) -> f64 {
        let full = script.full_score(self.course);
        if full <= 0.0 {
            return 0.0;
        }
        script.questions().iter().map(|&q| self.mean_scores[q]).sum::<f64>() / full
    }

    pub fn validity(&self, script: &ExamScript) -> f64 {
        let mut freq = vec![0.0; self.course.kp_count()];
        for &q in script.questions() {
            for &k in &self.course.question(q).kps {
                freq[k] += 1.0;
            }
        }
        cosine_similarity(&freq, self.course.kp_weights()).unwrap_or(0.0)
    }

    pub fn score(&self, script: &ExamScript) -> f64 {
        let c = self.config;
        c.difficulty_weight * -(self.difficulty(script) - c.target_difficulty).abs()
            + c.validity_weight * self.validity(script)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    pub script: ExamScript,
    pub fitness: f64,
    /// Best fitness after each generation, starting with the initial
    /// population.
    pub best_per_generation: Vec<f64>,
}

/// Uniform crossover on sets: shared questions are kept, the rest of each
/// parent's questions are kept with probability one half, then the child is
/// repaired to `n` questions.
fn crossover<R: Rng + ?Sized>(
    a: &ExamScript,
    b: &ExamScript,
    n: usize,
    bank_size: usize,
    rng: &mut R,
) -> ExamScript {
    let sa = a.as_set();
    let sb = b.as_set();
    let union: Vec<usize> = sa.union(&sb).copied().collect();
    let mut child: Vec<usize> = union
        .iter()
        .copied()
        .filter(|q| (sa.contains(q) && sb.contains(q)) || rng.random::<bool>())
        .collect();
    repair(&mut child, &union, n, bank_size, rng);
    child.sort_unstable();
    ExamScript::from_sorted_unchecked(child)
}

/// Trims at random or fills from `pool` first, then from the bank.
fn repair<R: Rng + ?Sized>(
    child: &mut Vec<usize>,
    pool: &[usize],
    n: usize,
    bank_size: usize,
    rng: &mut R,
) {
    child.shuffle(rng);
    child.truncate(n);
    if child.len() < n {
        let mut spare: Vec<usize> = pool.iter().copied().filter(|q| !child.contains(q)).collect();
        spare.shuffle(rng);
        let need = n - child.len();
        child.extend(spare.into_iter().take(need));
    }
    while child.len() < n {
        let q = rng.random_range(0..bank_size);
        if !child.contains(&q) {
            child.push(q);
        }
    }
}

/// Each gene is replaced with probability `rate` by a bank question not in
/// the script.
fn mutate<R: Rng + ?Sized>(script: &ExamScript, rate: f64, bank_size: usize, rng: &mut R) -> ExamScript {
    let mut genes = script.questions().to_vec();
    if genes.len() >= bank_size || rate <= 0.0 {
        return script.clone();
    }
    for i in 0..genes.len() {
        if rng.random::<f64>() < rate {
            loop {
                let q = rng.random_range(0..bank_size);
                if !genes.contains(&q) {
                    genes[i] = q;
                    break;
                }
            }
        }
    }
    genes.sort_unstable();
    ExamScript::from_sorted_unchecked(genes)
}

fn tournament<'p, R: Rng + ?Sized>(
    pop: &'p [ExamScript],
    fit: &[f64],
    size: usize,
    rng: &mut R,
) -> &'p ExamScript {
    let idx: Vec<usize> = (0..pop.len()).collect();
    let best = (0..size)
        .map(|_| *idx.choose(rng).expect("population is non-empty"))
        .max_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(b.cmp(&a)))
        .expect("tournament size is positive");
    &pop[best]
}

fn best_index(fit: &[f64]) -> usize {
    (0..fit.len())
        .max_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(b.cmp(&a)))
        .expect("population is non-empty")
}

/// Evolves a population seeded from random KP-weighted scripts and returns
/// the fittest individual. `observer` sees every generation's population,
/// the initial one included.
pub fn ga_run(
    masteries: &[Vec<f64>],
    course: &Course,
    n: usize,
    config: &GaConfig,
    seed: u64,
    observer: &mut dyn FnMut(usize, &[ExamScript]),
) -> Result<GaOutcome> {
    config.validate()?;
    let bank = course.questions().len();
    if n == 0 || n > bank {
        return Err(Error::Invalid(format!("cannot pick {n} questions from {bank}")));
    }
    let fitness = Fitness::new(masteries, course, config)?;
    let sampler = RsfSampler::new(course)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pop: Vec<ExamScript> = (0..config.population)
        .map(|_| sampler.sample(n, &mut rng))
        .collect::<Result<_>>()?;
    let evaluate = |pop: &[ExamScript]| -> Vec<f64> { pop.par_iter().map(|s| fitness.score(s)).collect() };
    let mut fit = evaluate(&pop);
    observer(0, &pop);
    let mut history = vec![fit[best_index(&fit)]];
    for generation in 1..=config.generations {
        let mut next = Vec::with_capacity(config.population);
        next.push(pop[best_index(&fit)].clone());
        while next.len() < config.population {
            let a = tournament(&pop, &fit, config.tournament_size, &mut rng);
            let child = if rng.random::<f64>() < config.crossover_rate {
                let b = tournament(&pop, &fit, config.tournament_size, &mut rng);
                crossover(a, b, n, bank, &mut rng)
            } else {
                a.clone()
            };
            next.push(mutate(&child, config.mutation_rate, bank, &mut rng));
        }
        pop = next;
        fit = evaluate(&pop);
        observer(generation, &pop);
        history.push(fit[best_index(&fit)]);
    }
    let best = best_index(&fit);
    Ok(GaOutcome {
        script: pop[best].clone(),
        fitness: fit[best],
        best_per_generation: history,
    })
}

pub fn ga_generate_from_masteries(
    masteries: &[Vec<f64>],
    course: &Course,
    n: usize,
    config: &GaConfig,
    seed: u64,
) -> Result<GaOutcome> {
    ga_run(masteries, course, n, config, seed, &mut |_, _| {})
}

pub fn ga_generate(
    course: &Course,
    roster: &ClassRoster,
    model: &DktModel,
    n: usize,
    config: &GaConfig,
    seed: u64,
) -> Result<ExamScript> {
    let masteries = predict_class(model, &roster.histories, course)?;
    Ok(ga_generate_from_masteries(&masteries, course, n, config, seed)?.script)
}
