//! Class conditions and sample-and-filter training data.
//!
//! A class condition summarizes the class's mastery matrix as the mean and
//! population standard deviation of each KP. Training scripts are drawn by
//! frequency-weighted KP sampling; the candidates whose class score
//! histogram is closest to the target distribution are kept.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assess::{rationality_bins, ExamScript, TargetDistribution, BIN_COUNT, KL_EPSILON};
use crate::data::{ClassRoster, Course};
use crate::dkt::{predict_class, DktModel};
use crate::error::{Error, Result};

/// Per KP: class mean mastery followed by its standard deviation, so the
/// vector has length `2|K|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Condition {
    pub values: Vec<f64>,
}

impl Condition {
    pub fn kp_count(&self) -> usize {
        self.values.len() / 2
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.values[2 * k]
    }

    pub fn std(&self, k: usize) -> f64 {
        self.values[2 * k + 1]
    }
}

/// Condition from a mastery matrix with one row per student.
pub fn condition_from_masteries(masteries: &[Vec<f64>]) -> Result<Condition> {
    let first = masteries
        .first()
        .ok_or_else(|| Error::InsufficientData("empty class".into()))?;
    let n = masteries.len() as f64;
    let k = first.len();
    let mut values = Vec::with_capacity(2 * k);
    for kp in 0..k {
        let mean = masteries.iter().map(|m| m[kp]).sum::<f64>() / n;
        let var = masteries
            .iter()
            .map(|m| (m[kp] - mean).powi(2))
            .sum::<f64>()
            / n;
        values.push(mean);
        values.push(var.sqrt());
    }
    Ok(Condition { values })
}

pub fn build_condition(roster: &ClassRoster, model: &DktModel, course: &Course) -> Result<Condition> {
    if roster.is_empty() {
        return Err(Error::InsufficientData("empty class".into()));
    }
    condition_from_masteries(&predict_class(model, &roster.histories, course)?)
}

/// Question sampler for one course: KPs are drawn with probability
/// proportional to `w(k)`, then one not-yet-chosen covering question
/// uniformly.
#[derive(Debug, Clone)]
pub struct RsfSampler {
    kp_dist: WeightedIndex<f64>,
    by_kp: Vec<Vec<usize>>,
    bank_size: usize,
}

/// Failed KP draws tolerated per script slot before giving up.
const MAX_RETRIES_PER_SLOT: usize = 10_000;

impl RsfSampler {
    pub fn new(course: &Course) -> Result<Self> {
        let kp_dist = WeightedIndex::new(course.kp_weights().iter().copied())
            .map_err(|e| Error::Sampling(format!("KP weights: {e}")))?;
        Ok(Self {
            kp_dist,
            by_kp: course.questions_by_kp(),
            bank_size: course.questions().len(),
        })
    }

    pub fn draw_kp<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.kp_dist.sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ExamScript> {
        if n > self.bank_size {
            return Err(Error::Sampling(format!(
                "script of {n} questions from a bank of {}",
                self.bank_size
            )));
        }
        let mut taken = vec![false; self.bank_size];
        let mut chosen = Vec::with_capacity(n);
        while chosen.len() < n {
            let mut placed = false;
            for _ in 0..MAX_RETRIES_PER_SLOT {
                let k = self.draw_kp(rng);
                let free: Vec<usize> = self.by_kp[k].iter().copied().filter(|&q| !taken[q]).collect();
                if free.is_empty() {
                    continue;
                }
                let q = free[rng.random_range(0..free.len())];
                taken[q] = true;
                chosen.push(q);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Sampling(format!(
                    "no free question after {MAX_RETRIES_PER_SLOT} KP draws ({} of {n} placed)",
                    chosen.len()
                )));
            }
        }
        chosen.sort_unstable();
        Ok(ExamScript::from_sorted_unchecked(chosen))
    }
}

pub fn sample_script_rsf(course: &Course, n: usize, seed: u64) -> Result<ExamScript> {
    RsfSampler::new(course)?.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// RNG for candidate `index` of a seeding run; independent of thread count.
pub(crate) fn candidate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sub-seed number `index` of `stream` under a master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.random()
}

/// Expected score of every student on every bank question, so that script
/// scores reduce to sums.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    /// `per_student[s][q]` is `m_s(q)`.
    per_student: Vec<Vec<f64>>,
    full_scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(masteries: &[Vec<f64>], course: &Course) -> Self {
        let per_student = masteries
            .iter()
            .map(|m| {
                course
                    .questions()
                    .iter()
                    .map(|q| crate::assess::question_score(m, q))
                    .collect()
            })
            .collect();
        Self {
            per_student,
            full_scores: course.questions().iter().map(|q| q.full_score).collect(),
        }
    }

    /// Class histogram of a script on the 0..=100 scale.
    pub fn histogram(&self, script: &ExamScript) -> Vec<f64> {
        let full: f64 = script.questions().iter().map(|&q| self.full_scores[q]).sum();
        let mut bins = vec![0.0; BIN_COUNT];
        if full <= 0.0 || self.per_student.is_empty() {
            return bins;
        }
        let w = 1.0 / self.per_student.len() as f64;
        for row in &self.per_student {
            let s: f64 = script.questions().iter().map(|&q| row[q]).sum();
            let scaled = s / full * 100.0;
            bins[(scaled.round().max(0.0) as usize).min(BIN_COUNT - 1)] += w;
        }
        bins
    }

    pub fn rationality(&self, script: &ExamScript, target: &TargetDistribution) -> f64 {
        rationality_bins(&self.histogram(script), &target.bins, KL_EPSILON)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedingConfig {
    /// Questions per script.
    pub n: usize,
    /// Candidate scripts drawn per class.
    pub m: usize,
    /// Share of candidates adopted.
    pub keep_fraction: f64,
}

impl Default for SeedingConfig {
    fn default() -> Self {
        Self {
            n: 40,
            m: 1000,
            keep_fraction: 0.01,
        }
    }
}

impl SeedingConfig {
    pub fn keep_count(&self) -> usize {
        (self.m as f64 * self.keep_fraction).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub script: ExamScript,
    pub rationality: f64,
}

/// Every candidate of a sample-and-filter run, with the adopted ones marked.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub candidates: Vec<Candidate>,
    /// Indices into `candidates`, best first.
    pub adopted: Vec<usize>,
}

impl FilterOutcome {
    pub fn adopted_scripts(&self) -> Vec<ExamScript> {
        self.adopted
            .iter()
            .map(|&i| self.candidates[i].script.clone())
            .collect()
    }
}

/// Draws `m` scripts, scores each against the target, and keeps the top
/// `ceil(m·keep_fraction)` by rationality (ties keep the earlier draw).
pub fn sample_and_filter(
    masteries: &[Vec<f64>],
    course: &Course,
    config: &SeedingConfig,
    target: &TargetDistribution,
    seed: u64,
) -> Result<FilterOutcome> {
    let keep = config.keep_count();
    if keep == 0 || keep > config.m {
        return Err(Error::Invalid(format!(
            "keep fraction {} of {} candidates adopts {keep}",
            config.keep_fraction, config.m
        )));
    }
    let sampler = RsfSampler::new(course)?;
    let table = ScoreTable::new(masteries, course);
    let candidates: Vec<Candidate> = (0..config.m as u64)
        .into_par_iter()
        .map(|i| {
            let script = sampler.sample(config.n, &mut candidate_rng(seed, i))?;
            let rationality = table.rationality(&script, target);
            Ok(Candidate {
                script,
                rationality,
            })
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .rationality
            .total_cmp(&candidates[a].rationality)
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    Ok(FilterOutcome {
        candidates,
        adopted: order,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub condition: Condition,
    pub script: ExamScript,
}

impl TrainingInstance {
    pub fn target_vector(&self, bank_size: usize) -> Vec<f64> {
        vectorize_script(&self.script, bank_size)
    }
}

/// Ones at the script's bank positions, zeros elsewhere.
pub fn vectorize_script(script: &ExamScript, bank_size: usize) -> Vec<f64> {
    let mut v = vec![0.0; bank_size];
    for &q in script.questions() {
        v[q] = 1.0;
    }
    v
}

/// Training instances for one class: its condition paired with each adopted
/// script.
pub fn make_training_data(
    roster: &ClassRoster,
    model: &DktModel,
    course: &Course,
    config: &SeedingConfig,
    target: &TargetDistribution,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    let masteries = predict_class(model, &roster.histories, course)?;
    let (instances, _) = training_data_from_masteries(&masteries, course, config, target, seed)?;
    Ok(instances)
}

pub fn training_data_from_masteries(
    masteries: &[Vec<f64>],
    course: &Course,
    config: &SeedingConfig,
    target: &TargetDistribution,
    seed: u64,
) -> Result<(Vec<TrainingInstance>, FilterOutcome)> {
    let condition = condition_from_masteries(masteries)?;
    let outcome = sample_and_filter(masteries, course, config, target, seed)?;
    let instances = outcome
        .adopted_scripts()
        .into_iter()
        .map(|script| TrainingInstance {
            condition: condition.clone(),
            script,
        })
        .collect();
    Ok((instances, outcome))
}

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    condition: Vec<f64>,
    questions: Vec<u64>,
}

/// One JSON object per line: `{"condition": [...], "questions": [ids]}`.
pub fn write_training_data(path: &Path, data: &[TrainingInstance], course: &Course) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in data {
        let line = InstanceLine {
            condition: inst.condition.values.clone(),
            questions: inst.script.question_ids(course),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_data(path: &Path, course: &Course) -> Result<Vec<TrainingInstance>> {
    let index: std::collections::HashMap<u64, usize> = course
        .questions()
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id, i))
        .collect();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let raw: InstanceLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if raw.condition.len() != 2 * course.kp_count() {
            return Err(err(format!(
                "condition length {} != 2x{} KPs",
                raw.condition.len(),
                course.kp_count()
            )));
        }
        let questions = raw
            .questions
            .iter()
            .map(|id| index.get(id).copied().ok_or_else(|| err(format!("unknown question {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let script = ExamScript::new(questions, course).map_err(|e| err(e.to_string()))?;
        out.push(TrainingInstance {
            condition: Condition {
                values: raw.condition,
            },
            script,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Question;

    fn single_kp_course(kps: &[usize], kp_count: usize) -> Course {
        let qub = kps
            .iter()
            .enumerate()
            .map(|(i, &k)| Question::new(i as u64, vec![k], 2.5, None).unwrap())
            .collect();
        Course::new(kp_count, qub, vec![]).unwrap()
    }

    #[test]
    fn condition_of_single_student_has_zero_spread() {
        let c = condition_from_masteries(&[vec![0.3, 0.9]]).unwrap();
        assert_eq!(c.values, vec![0.3, 0.0, 0.9, 0.0]);
    }

    #[test]
    fn condition_uses_population_std() {
        let c = condition_from_masteries(&[vec![0.2], vec![0.8]]).unwrap();
        assert!((c.mean(0) - 0.5).abs() < 1e-12);
        assert!((c.std(0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn condition_length_is_twice_kp_count() {
        let m = vec![vec![0.5; 123]; 3];
        assert_eq!(condition_from_masteries(&m).unwrap().values.len(), 246);
    }

    #[test]
    fn zero_weight_kp_is_never_drawn() {
        // KP 9 exists but no question covers it
        let c = single_kp_course(&[0, 1, 2, 3, 4, 5, 6, 7, 8], 10);
        let s = RsfSampler::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..5000).all(|_| s.draw_kp(&mut rng) != 9));
    }

    #[test]
    fn full_bank_script_is_forced() {
        let c = single_kp_course(&[0, 0, 1, 2, 2, 2], 3);
        let s = sample_script_rsf(&c, 6, 3).unwrap();
        assert_eq!(s.questions(), &[0, 1, 2, 3, 4, 5]);
        assert!(sample_script_rsf(&c, 7, 3).is_err());
    }

    #[test]
    fn kp_draws_follow_weights() {
        let mut kps = vec![0; 9];
        kps.push(1);
        let c = single_kp_course(&kps, 2);
        let s = RsfSampler::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zeros = (0..10_000).filter(|_| s.draw_kp(&mut rng) == 0).count();
        let rate = zeros as f64 / 10_000.0;
        assert!((rate - 0.9).abs() < 0.01, "{rate}");
    }

    #[test]
    fn vectorize() {
        let c = single_kp_course(&[0; 6], 1);
        let empty = ExamScript::new(vec![], &c).unwrap();
        assert_eq!(vectorize_script(&empty, 6), vec![0.0; 6]);
        let full = ExamScript::new((0..6).collect(), &c).unwrap();
        assert_eq!(vectorize_script(&full, 6), vec![1.0; 6]);
        let two = ExamScript::new(vec![2, 5], &c).unwrap();
        assert_eq!(vectorize_script(&two, 6), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn keep_everything_adopts_all() {
        let c = single_kp_course(&(0..20).map(|i| i % 4).collect::<Vec<_>>(), 4);
        let masteries = vec![vec![0.2, 0.5, 0.7, 0.9], vec![0.6, 0.6, 0.8, 0.4]];
        let cfg = SeedingConfig {
            n: 5,
            m: 30,
            keep_fraction: 1.0,
        };
        let out = sample_and_filter(&masteries, &c, &cfg, &TargetDistribution::default(), 2)
            .unwrap();
        assert_eq!(out.adopted.len(), 30);
        let cfg = SeedingConfig {
            keep_fraction: 0.0,
            ..cfg
        };
        assert!(sample_and_filter(&masteries, &c, &cfg, &TargetDistribution::default(), 2).is_err());
    }

    #[test]
    fn score_table_matches_direct_histogram() {
        let c = single_kp_course(&(0..20).map(|i| i % 4).collect::<Vec<_>>(), 4);
        let masteries = vec![vec![0.2, 0.5, 0.7, 0.9], vec![0.6, 0.6, 0.8, 0.4]];
        let s = sample_script_rsf(&c, 7, 9).unwrap();
        let direct = crate::assess::score_distribution(&masteries, &s, &c).unwrap();
        assert_eq!(ScoreTable::new(&masteries, &c).histogram(&s), direct.bins);
    }

    #[test]
    fn training_file_round_trip() {
        let c = single_kp_course(&[0, 1, 0, 1], 2);
        let data = vec![TrainingInstance {
            condition: Condition {
                values: vec![0.1, 0.2, 0.3, 0.4],
            },
            script: ExamScript::new(vec![1, 3], &c).unwrap(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        write_training_data(&p, &data, &c).unwrap();
        assert_eq!(read_training_data(&p, &c).unwrap(), data);
    }
}
