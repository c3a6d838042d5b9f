//! Course model, file ingestion, class formation and a synthetic cohort
//! generator with known latent mastery.
//!
//! File formats:
//!
//! * question bank: JSON lines, one question per line with `id`, `kps`,
//!   `full_score` and optional `kp_scores` (object keyed by KP index). An
//!   optional header line `{"kp_count": N}` fixes the number of KPs;
//!   otherwise it is one past the largest referenced KP.
//! * exercise bank: JSON lines with `id` and `kps`.
//! * records: CSV with header `student_id,exercise_id,correct,timestamp`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type KnowledgePoint = usize;
pub type StudentId = u64;

const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: u64,
    pub kps: Vec<KnowledgePoint>,
    pub full_score: f64,
    pub kp_scores: BTreeMap<KnowledgePoint, f64>,
}

impl Question {
    /// Builds a question, splitting `full_score` uniformly over its KPs when
    /// no per-KP scores are given.
    pub fn new(
        id: u64,
        kps: Vec<KnowledgePoint>,
        full_score: f64,
        kp_scores: Option<BTreeMap<KnowledgePoint, f64>>,
    ) -> Result<Self> {
        let kps: Vec<_> = kps.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if kps.is_empty() {
            return Err(Error::Invalid(format!("question {id} covers no knowledge point")));
        }
        if !(full_score >= 0.0 && full_score.is_finite()) {
            return Err(Error::Invalid(format!(
                "question {id} has negative or non-finite score {full_score}"
            )));
        }
        let kp_scores = match kp_scores {
            Some(s) => {
                if s.keys().copied().ne(kps.iter().copied()) {
                    return Err(Error::Invalid(format!(
                        "question {id}: kp_scores keys {:?} do not match kps {kps:?}",
                        s.keys().collect::<Vec<_>>()
                    )));
                }
                if s.values().any(|&v| !(v >= 0.0 && v.is_finite())) {
                    return Err(Error::Invalid(format!("question {id}: negative kp score")));
                }
                let total: f64 = s.values().sum();
                if (total - full_score).abs() > SCORE_TOLERANCE {
                    return Err(Error::Invalid(format!(
                        "question {id}: kp_scores sum {total} != full_score {full_score}"
                    )));
                }
                s
            }
            None => {
                let share = full_score / kps.len() as f64;
                kps.iter().map(|&k| (k, share)).collect()
            }
        };
        Ok(Self {
            id,
            kps,
            full_score,
            kp_scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exercise {
    pub id: u64,
    pub kps: Vec<KnowledgePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExerciseRecord {
    pub student: StudentId,
    pub exercise: u64,
    pub correct: bool,
    pub seq: u64,
}

/// Question bank, exercise bank and KP weights of one course.
#[derive(Debug, Clone, PartialEq)]
pub struct Course {
    kp_count: usize,
    qub: Vec<Question>,
    exb: Vec<Exercise>,
    kp_weights: Vec<f64>,
    exercise_index: HashMap<u64, usize>,
}

impl Course {
    pub fn new(kp_count: usize, qub: Vec<Question>, exb: Vec<Exercise>) -> Result<Self> {
        if qub.is_empty() {
            return Err(Error::Invalid("question bank is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for q in &qub {
            if !seen.insert(q.id) {
                return Err(Error::Invalid(format!("duplicate question id {}", q.id)));
            }
            if let Some(&k) = q.kps.iter().find(|&&k| k >= kp_count) {
                return Err(Error::Invalid(format!(
                    "question {} references KP {k} but the course has {kp_count}",
                    q.id
                )));
            }
        }
        let mut exercise_index = HashMap::with_capacity(exb.len());
        for (i, e) in exb.iter().enumerate() {
            if e.kps.is_empty() {
                return Err(Error::Invalid(format!("exercise {} covers no KP", e.id)));
            }
            if let Some(&k) = e.kps.iter().find(|&&k| k >= kp_count) {
                return Err(Error::Invalid(format!(
                    "exercise {} references KP {k} but the course has {kp_count}",
                    e.id
                )));
            }
            if exercise_index.insert(e.id, i).is_some() {
                return Err(Error::Invalid(format!("duplicate exercise id {}", e.id)));
            }
        }
        let kp_weights = compute_kp_weights(&qub, kp_count);
        Ok(Self {
            kp_count,
            qub,
            exb,
            kp_weights,
            exercise_index,
        })
    }

    pub fn kp_count(&self) -> usize {
        self.kp_count
    }

    pub fn questions(&self) -> &[Question] {
        &self.qub
    }

    pub fn question(&self, idx: usize) -> &Question {
        &self.qub[idx]
    }

    pub fn exercises(&self) -> &[Exercise] {
        &self.exb
    }

    pub fn exercise(&self, id: u64) -> Option<&Exercise> {
        self.exercise_index.get(&id).map(|&i| &self.exb[i])
    }

    pub fn kp_weights(&self) -> &[f64] {
        &self.kp_weights
    }

    /// Bank positions of the questions covering each KP.
    pub fn questions_by_kp(&self) -> Vec<Vec<usize>> {
        let mut by_kp = vec![Vec::new(); self.kp_count];
        for (i, q) in self.qub.iter().enumerate() {
            for &k in &q.kps {
                by_kp[k].push(i);
            }
        }
        by_kp
    }
}

/// `w(k)`: number of questions in the bank whose KP set contains `k`.
pub fn compute_kp_weights(qub: &[Question], kp_count: usize) -> Vec<f64> {
    let mut w = vec![0.0; kp_count];
    for q in qub {
        for &k in &q.kps {
            if k < kp_count {
                w[k] += 1.0;
            }
        }
    }
    w
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionLine {
    id: u64,
    kps: Vec<KnowledgePoint>,
    full_score: f64,
    #[serde(default)]
    kp_scores: Option<BTreeMap<KnowledgePoint, f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    kp_count: usize,
}

#[derive(Serialize)]
struct QuestionOut<'a> {
    id: u64,
    kps: &'a [KnowledgePoint],
    full_score: f64,
    kp_scores: &'a BTreeMap<KnowledgePoint, f64>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn json_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

/// Loads a question bank file into a course with an empty exercise bank.
/// Use [`load_course`] to attach exercises.
pub fn load_question_bank(path: &Path) -> Result<Course> {
    let (kp_count, qub) = read_questions(path)?;
    Course::new(kp_count, qub, Vec::new())
}

fn read_questions(path: &Path) -> Result<(usize, Vec<Question>)> {
    let mut declared = None;
    let mut qub = Vec::new();
    for (lineno, line) in json_lines(path)? {
        if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
            declared = Some(h.kp_count);
            continue;
        }
        let raw: QuestionLine =
            serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let q = Question::new(raw.id, raw.kps, raw.full_score, raw.kp_scores)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if let Some(n) = declared {
            if let Some(&k) = q.kps.iter().find(|&&k| k >= n) {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("dangling KP reference {k} (kp_count {n})"),
                ));
            }
        }
        qub.push(q);
    }
    let used = qub
        .iter()
        .flat_map(|q| q.kps.iter())
        .max()
        .map_or(0, |&k| k + 1);
    Ok((declared.unwrap_or(used), qub))
}

pub fn load_exercise_bank(path: &Path) -> Result<Vec<Exercise>> {
    let mut exb = Vec::new();
    for (lineno, line) in json_lines(path)? {
        if serde_json::from_str::<HeaderLine>(&line).is_ok() {
            continue;
        }
        let e: Exercise =
            serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if e.kps.is_empty() {
            return Err(parse_err(path, lineno, "exercise covers no KP"));
        }
        exb.push(e);
    }
    Ok(exb)
}

/// Question bank plus exercise bank. The KP count is the larger of the two
/// files' implied counts unless the question bank declares one.
pub fn load_course(questions: &Path, exercises: &Path) -> Result<Course> {
    let (kp_count, qub) = read_questions(questions)?;
    let exb = load_exercise_bank(exercises)?;
    Course::new(kp_count, qub, exb)
}

pub fn write_question_bank(path: &Path, course: &Course) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::json!({ "kp_count": course.kp_count }))?;
    for q in &course.qub {
        let line = QuestionOut {
            id: q.id,
            kps: &q.kps,
            full_score: q.full_score,
            kp_scores: &q.kp_scores,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_exercise_bank(path: &Path, course: &Course) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::json!({ "kp_count": course.kp_count }))?;
    for e in &course.exb {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RecordRow {
    student_id: StudentId,
    exercise_id: u64,
    correct: String,
    timestamp: i64,
}

/// Records read from a CSV export, plus the number of rows skipped because
/// they referenced an exercise missing from the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecords {
    pub records: Vec<ExerciseRecord>,
    pub skipped_unknown: usize,
}

/// Reads the records CSV. Rows are ordered per student by timestamp (stable
/// on file order) and numbered with a per-student `seq`.
pub fn load_records(path: &Path, course: &Course) -> Result<LoadedRecords> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (i, row) in rdr.deserialize::<RecordRow>().enumerate() {
        let lineno = i + 2;
        let row = row.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let correct = match row.correct.as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("correct must be 0 or 1, got {other:?}"),
                ))
            }
        };
        if course.exercise(row.exercise_id).is_none() {
            skipped += 1;
            continue;
        }
        rows.push((row.student_id, row.timestamp, i, row.exercise_id, correct));
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} rows with unknown exercise ids", path.display());
    }
    rows.sort_by_key(|r| (r.0, r.1, r.2));
    let mut records = Vec::with_capacity(rows.len());
    let mut seq = 0;
    let mut last = None;
    for (student, _, _, exercise, correct) in rows {
        if last != Some(student) {
            seq = 0;
            last = Some(student);
        }
        records.push(ExerciseRecord {
            student,
            exercise,
            correct,
            seq,
        });
        seq += 1;
    }
    Ok(LoadedRecords {
        records,
        skipped_unknown: skipped,
    })
}

pub fn write_records(path: &Path, records: &[ExerciseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["student_id", "exercise_id", "correct", "timestamp"])?;
    for r in records {
        w.write_record(&[
            r.student.to_string(),
            r.exercise.to_string(),
            if r.correct { "1" } else { "0" }.to_string(),
            r.seq.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Every student's seq-ordered history.
pub type StudentHistories = BTreeMap<StudentId, Vec<ExerciseRecord>>;

pub fn group_by_student(records: &[ExerciseRecord]) -> StudentHistories {
    let mut out: StudentHistories = BTreeMap::new();
    for r in records {
        out.entry(r.student).or_default().push(*r);
    }
    for h in out.values_mut() {
        h.sort_by_key(|r| r.seq);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRoster {
    pub students: Vec<StudentId>,
    pub histories: Vec<Vec<ExerciseRecord>>,
}

impl ClassRoster {
    pub fn new(students: Vec<StudentId>, all: &StudentHistories) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut histories = Vec::with_capacity(students.len());
        for &s in &students {
            if !seen.insert(s) {
                return Err(Error::Invalid(format!("student {s} listed twice in a class")));
            }
            match all.get(&s) {
                Some(h) if !h.is_empty() => histories.push(h.clone()),
                _ => return Err(Error::Invalid(format!("student {s} has no records"))),
            }
        }
        Ok(Self {
            students,
            histories,
        })
    }

    pub fn len(&self) -> usize {
        self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }
}

/// Draws `count` classes of `class_size` distinct students each. Students
/// may appear in several classes.
pub fn form_class_ids(
    students: &[StudentId],
    class_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<StudentId>>> {
    if class_size == 0 || class_size > students.len() {
        return Err(Error::Invalid(format!(
            "class size {class_size} not in [1, {}]",
            students.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut ids: Vec<_> = sample(&mut rng, students.len(), class_size)
                .into_iter()
                .map(|i| students[i])
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect())
}

pub fn form_classes(
    histories: &StudentHistories,
    class_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ClassRoster>> {
    let students: Vec<_> = histories.keys().copied().collect();
    form_class_ids(&students, class_size, count, seed)?
        .into_iter()
        .map(|ids| ClassRoster::new(ids, histories))
        .collect()
}

/// Knobs for [`synth_cohort`]. The first six fields are the cohort sizes and
/// seed; the rest shape the generated course and population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kp_count: usize,
    pub qub_size: usize,
    pub exb_size: usize,
    pub student_count: usize,
    pub records_per_student: usize,
    pub seed: u64,
    /// Score of every generated question.
    pub question_score: f64,
    /// KP popularity decays as `(rank+1)^-exponent`.
    pub kp_popularity_exponent: f64,
    /// Probabilities of a question covering 1, 2, 3, ... KPs.
    pub kps_per_question: Vec<f64>,
    pub kps_per_exercise: Vec<f64>,
    /// KP base mastery is uniform on this range.
    pub kp_mean_range: (f64, f64),
    /// Standard deviation of the per-student ability shift on the logit scale.
    pub ability_sd: f64,
    /// Beta concentration around each student's per-KP mean.
    pub beta_concentration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kp_count: 30,
            qub_size: 500,
            exb_size: 300,
            student_count: 1000,
            records_per_student: 100,
            seed: 0,
            question_score: 2.5,
            kp_popularity_exponent: 1.2,
            kps_per_question: vec![0.45, 0.4, 0.15],
            kps_per_exercise: vec![0.7, 0.3],
            kp_mean_range: (0.4, 0.9),
            ability_sd: 1.2,
            beta_concentration: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub course: Course,
    pub records: Vec<ExerciseRecord>,
    pub latent: BTreeMap<StudentId, Vec<f64>>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn draw_kp_set<R: Rng>(
    rng: &mut R,
    size_probs: &[f64],
    popularity: &[f64],
) -> Vec<KnowledgePoint> {
    let mut u: f64 = rng.random();
    let mut size = size_probs.len();
    for (i, p) in size_probs.iter().enumerate() {
        if u < *p {
            size = i + 1;
            break;
        }
        u -= p;
    }
    let size = size.clamp(1, popularity.len());
    let mut chosen = BTreeSet::new();
    let total: f64 = popularity.iter().sum();
    while chosen.len() < size {
        let mut r = rng.random::<f64>() * total;
        let mut k = popularity.len() - 1;
        for (i, w) in popularity.iter().enumerate() {
            if r < *w {
                k = i;
                break;
            }
            r -= w;
        }
        chosen.insert(k);
    }
    chosen.into_iter().collect()
}

/// Generates a course, a student population with latent per-KP mastery, and
/// exercise records whose correctness is Bernoulli with the mean latent
/// mastery over the exercise's KPs.
pub fn synth_cohort(cfg: &SynthConfig) -> Result<SyntheticCohort> {
    if cfg.kp_count == 0
        || cfg.qub_size == 0
        || cfg.exb_size == 0
        || cfg.student_count == 0
        || cfg.records_per_student == 0
    {
        return Err(Error::Invalid("all synthetic cohort sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let popularity: Vec<f64> = (0..cfg.kp_count)
        .map(|k| ((k + 1) as f64).powf(-cfg.kp_popularity_exponent))
        .collect();

    let mut qub = Vec::with_capacity(cfg.qub_size);
    for id in 0..cfg.qub_size as u64 {
        let kps = draw_kp_set(&mut rng, &cfg.kps_per_question, &popularity);
        qub.push(Question::new(id, kps, cfg.question_score, None)?);
    }
    // Every KP gets at least one exercise so DKT sees it.
    let mut exb = Vec::with_capacity(cfg.exb_size.max(cfg.kp_count));
    for id in 0..cfg.exb_size.max(cfg.kp_count) as u64 {
        let kps = if (id as usize) < cfg.kp_count {
            vec![id as usize]
        } else {
            draw_kp_set(&mut rng, &cfg.kps_per_exercise, &vec![1.0; cfg.kp_count])
        };
        exb.push(Exercise { id, kps });
    }
    let course = Course::new(cfg.kp_count, qub, exb)?;

    let (lo, hi) = cfg.kp_mean_range;
    let kp_base: Vec<f64> = (0..cfg.kp_count)
        .map(|_| logit(rng.random_range(lo..=hi)))
        .collect();
    let ability = Normal::new(0.0, cfg.ability_sd.max(0.0))
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let mut latent = BTreeMap::new();
    for s in 0..cfg.student_count as u64 {
        let a = ability.sample(&mut rng);
        let mastery = kp_base
            .iter()
            .map(|b| {
                let mean = crate::neural::sigmoid(b + a).clamp(1e-3, 1.0 - 1e-3);
                let kappa = cfg.beta_concentration;
                Beta::new(mean * kappa, (1.0 - mean) * kappa)
                    .map(|d| d.sample(&mut rng))
                    .unwrap_or(mean)
            })
            .collect();
        latent.insert(s, mastery);
    }
    let records = sample_records(&course, &latent, cfg.records_per_student, &mut rng);
    Ok(SyntheticCohort {
        course,
        records,
        latent,
    })
}

/// Draws `per_student` uniformly chosen exercises per student and samples
/// correctness from the latent mastery.
pub fn sample_records<R: Rng>(
    course: &Course,
    latent: &BTreeMap<StudentId, Vec<f64>>,
    per_student: usize,
    rng: &mut R,
) -> Vec<ExerciseRecord> {
    let exb = course.exercises();
    let mut records = Vec::with_capacity(latent.len() * per_student);
    for (&student, mastery) in latent {
        for seq in 0..per_student as u64 {
            let e = &exb[rng.random_range(0..exb.len())];
            let p = e.kps.iter().map(|&k| mastery[k]).sum::<f64>() / e.kps.len() as f64;
            let correct = rng.random::<f64>() < p;
            records.push(ExerciseRecord {
                student,
                exercise: e.id,
                correct,
                seq,
            });
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: u64, kps: &[usize]) -> Question {
        Question::new(id, kps.to_vec(), 1.0, None).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn weights_count_single_kp_questions() {
        let bank = vec![q(0, &[0]), q(1, &[0]), q(2, &[0])];
        assert_eq!(compute_kp_weights(&bank, 1), vec![3.0]);
    }

    #[test]
    fn weights_for_multi_kp_and_uncovered() {
        let w = compute_kp_weights(&[q(0, &[0, 1])], 6);
        assert_eq!(w, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_match_brute_force_count() {
        let bank: Vec<_> = (0..10)
            .map(|i| if i % 5 < 2 { q(i, &[2, 3]) } else { q(i, &[1]) })
            .collect();
        let w = compute_kp_weights(&bank, 4);
        let brute = bank.iter().filter(|q| q.kps.contains(&2)).count() as f64;
        assert_eq!(w[2], brute);
        assert_eq!(w[2], 4.0);
    }

    #[test]
    fn kp_score_allocation() {
        let one = Question::new(0, vec![4], 2.5, None).unwrap();
        assert_eq!(one.kp_scores, BTreeMap::from([(4, 2.5)]));
        let three = Question::new(1, vec![1, 2, 4], 3.0, None).unwrap();
        for k in [1, 2, 4] {
            assert_eq!(three.kp_scores[&k], 1.0);
        }
        let total: f64 = three.kp_scores.values().sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn explicit_kp_scores_must_be_consistent() {
        let bad_keys = BTreeMap::from([(0, 1.0), (5, 1.0)]);
        assert!(Question::new(0, vec![0, 1], 2.0, Some(bad_keys)).is_err());
        let bad_sum = BTreeMap::from([(0, 1.0), (1, 0.5)]);
        assert!(Question::new(0, vec![0, 1], 2.0, Some(bad_sum)).is_err());
        assert!(Question::new(0, vec![0], -1.0, None).is_err());
    }

    #[test]
    fn load_bank_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "bank.jsonl",
            "{\"kp_count\": 3}\n{\"id\":0,\"kps\":[0],\"full_score\":1.0}\n{\"id\":1,\"kps\":[7],\"full_score\":1.0}\n",
        );
        match load_question_bank(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(&dir, "neg.jsonl", "{\"id\":0,\"kps\":[0],\"full_score\":-2}\n");
        assert!(matches!(load_question_bank(&p), Err(Error::Parse { line: 1, .. })));
        let p = write(&dir, "garbage.jsonl", "{\"id\":0,\"kps\":[0],\"full_score\":1}\nnot json\n");
        assert!(matches!(load_question_bank(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn load_bank_with_explicit_scores() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "bank.jsonl",
            "{\"id\":9,\"kps\":[0,2],\"full_score\":2.5,\"kp_scores\":{\"0\":1.5,\"2\":1.0}}\n",
        );
        let c = load_question_bank(&p).unwrap();
        assert_eq!(c.kp_count(), 3);
        assert_eq!(c.question(0).kp_scores[&0], 1.5);
        assert_eq!(c.kp_weights(), &[1.0, 0.0, 1.0]);
    }

    fn small_course() -> Course {
        Course::new(
            2,
            vec![q(0, &[0]), q(1, &[1])],
            vec![Exercise { id: 10, kps: vec![0] }, Exercise { id: 11, kps: vec![1] }],
        )
        .unwrap()
    }

    #[test]
    fn empty_records_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "r.csv", "student_id,exercise_id,correct,timestamp\n");
        let got = load_records(&p, &small_course()).unwrap();
        assert!(got.records.is_empty());
        assert_eq!(got.skipped_unknown, 0);
    }

    #[test]
    fn records_ordered_by_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.csv",
            "student_id,exercise_id,correct,timestamp\n5,11,1,200\n5,10,0,100\n3,10,1,7\n",
        );
        let got = load_records(&p, &small_course()).unwrap().records;
        let s5: Vec<_> = got.iter().filter(|r| r.student == 5).collect();
        assert_eq!(s5[0].exercise, 10);
        assert_eq!(s5[0].seq, 0);
        assert!(!s5[0].correct);
        assert_eq!(s5[1].exercise, 11);
        assert_eq!(s5[1].seq, 1);
        assert!(s5[1].correct);
    }

    #[test]
    fn records_skip_unknown_and_reject_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.csv",
            "student_id,exercise_id,correct,timestamp\n1,10,1,0\n1,99,1,1\n",
        );
        let got = load_records(&p, &small_course()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.skipped_unknown, 1);
        let p = write(
            &dir,
            "bad.csv",
            "student_id,exercise_id,correct,timestamp\n1,10,yes,0\n",
        );
        assert!(matches!(
            load_records(&p, &small_course()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn class_formation() {
        let ids: Vec<u64> = (0..4163).collect();
        let classes = form_class_ids(&ids, 50, 100, 11).unwrap();
        assert_eq!(classes.len(), 100);
        for c in &classes {
            assert_eq!(c.len(), 50);
            assert_eq!(c.iter().collect::<BTreeSet<_>>().len(), 50);
        }
        assert_eq!(classes, form_class_ids(&ids, 50, 100, 11).unwrap());
        let full = form_class_ids(&ids[..10], 10, 1, 0).unwrap();
        assert_eq!(full[0], ids[..10].to_vec());
        assert!(form_class_ids(&ids[..10], 11, 1, 0).is_err());
    }

    #[test]
    fn extreme_latent_mastery_gives_deterministic_answers() {
        let course = small_course();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latent = BTreeMap::from([(0, vec![1.0, 1.0]), (1, vec![0.0, 0.0])]);
        let recs = sample_records(&course, &latent, 200, &mut rng);
        assert!(recs.iter().filter(|r| r.student == 0).all(|r| r.correct));
        assert!(recs.iter().filter(|r| r.student == 1).all(|r| !r.correct));
    }

    #[test]
    fn correct_rate_tracks_latent_mastery() {
        let course = small_course();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let latent = BTreeMap::from([(0, vec![0.7, 0.7])]);
        let recs = sample_records(&course, &latent, 10_000, &mut rng);
        let rate = recs.iter().filter(|r| r.correct).count() as f64 / recs.len() as f64;
        assert!((rate - 0.7).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn synthetic_cohort_is_consistent() {
        let cfg = SynthConfig {
            kp_count: 8,
            qub_size: 40,
            exb_size: 20,
            student_count: 30,
            records_per_student: 10,
            seed: 4,
            ..SynthConfig::default()
        };
        let a = synth_cohort(&cfg).unwrap();
        let total_w: f64 = a.course.kp_weights().iter().sum();
        let occurrences: usize = a.course.questions().iter().map(|q| q.kps.len()).sum();
        assert_eq!(total_w, occurrences as f64);
        assert_eq!(a.records.len(), 300);
        assert_eq!(a.latent.len(), 30);
        assert!(a.latent.values().flatten().all(|&m| (0.0..=1.0).contains(&m)));
        let b = synth_cohort(&cfg).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn bank_round_trips_through_files() {
        let cfg = SynthConfig {
            kp_count: 5,
            qub_size: 12,
            exb_size: 6,
            student_count: 3,
            records_per_student: 4,
            ..SynthConfig::default()
        };
        let cohort = synth_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let qp = dir.path().join("q.jsonl");
        let ep = dir.path().join("e.jsonl");
        let rp = dir.path().join("r.csv");
        write_question_bank(&qp, &cohort.course).unwrap();
        write_exercise_bank(&ep, &cohort.course).unwrap();
        write_records(&rp, &cohort.records).unwrap();
        let course = load_course(&qp, &ep).unwrap();
        assert_eq!(course, cohort.course);
        let loaded = load_records(&rp, &course).unwrap();
        assert_eq!(loaded.records, cohort.records);
    }

    #[test]
    fn roster_rejects_duplicates_and_missing() {
        let recs = vec![ExerciseRecord {
            student: 1,
            exercise: 10,
            correct: true,
            seq: 0,
        }];
        let h = group_by_student(&recs);
        assert!(ClassRoster::new(vec![1, 1], &h).is_err());
        assert!(ClassRoster::new(vec![2], &h).is_err());
        assert_eq!(ClassRoster::new(vec![1], &h).unwrap().len(), 1);
    }
}
