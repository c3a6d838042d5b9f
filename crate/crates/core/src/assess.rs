//! Expected-score estimation and the four exam-script quality metrics:
//! difficulty, distinguishability, validity and rationality.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::data::{ClassRoster, Course, Question};
use crate::dkt::{predict_class, DktModel};
use crate::error::{dim_check, Error, Result};

pub const BIN_COUNT: usize = 101;
/// Share of students in each of the top and bottom groups.
pub const EXTREME_GROUP_SHARE: f64 = 0.27;
/// Added to every histogram bin before the KL divergence.
pub const KL_EPSILON: f64 = 1e-9;
/// Standard-normal quantile used by the lower-tail bound on the score spread.
pub const LOWER_TAIL_Z: f64 = -1.103063;

/// A set of questions, stored as ascending positions in the question bank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExamScript {
    questions: Vec<usize>,
}

impl ExamScript {
    pub fn new(mut questions: Vec<usize>, course: &Course) -> Result<Self> {
        questions.sort_unstable();
        let before = questions.len();
        questions.dedup();
        if questions.len() != before {
            return Err(Error::Invalid("exam script repeats a question".into()));
        }
        if let Some(&q) = questions.iter().find(|&&q| q >= course.questions().len()) {
            return Err(Error::Invalid(format!(
                "question index {q} outside bank of {}",
                course.questions().len()
            )));
        }
        Ok(Self { questions })
    }

    /// For callers that already guarantee distinct, in-range indices.
    pub(crate) fn from_sorted_unchecked(questions: Vec<usize>) -> Self {
        debug_assert!(questions.windows(2).all(|w| w[0] < w[1]));
        Self { questions }
    }

    pub fn questions(&self) -> &[usize] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn as_set(&self) -> BTreeSet<usize> {
        self.questions.iter().copied().collect()
    }

    /// Question ids as written in the bank file.
    pub fn question_ids(&self, course: &Course) -> Vec<u64> {
        self.questions.iter().map(|&i| course.question(i).id).collect()
    }

    pub fn full_score(&self, course: &Course) -> f64 {
        self.questions
            .iter()
            .map(|&i| course.question(i).full_score)
            .sum()
    }
}

/// `m_s(q) = Σ_{k∈K_q} p_{s,k} m(q,k)`
pub fn question_score(mastery: &[f64], q: &Question) -> f64 {
    q.kp_scores.iter().map(|(&k, &m)| mastery[k] * m).sum()
}

/// `R_s(E) = Σ_{q∈E} m_s(q)`
pub fn script_score(mastery: &[f64], script: &ExamScript, course: &Course) -> f64 {
    script
        .questions
        .iter()
        .map(|&i| question_score(mastery, course.question(i)))
        .sum()
}

/// Histogram of class scores on a 0..=100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub bins: Vec<f64>,
    /// Per-student scores rescaled to 0..=100.
    pub raw_scores: Vec<f64>,
}

impl ScoreDistribution {
    /// Bins scores (already on the 0..=100 scale) to the nearest integer.
    pub fn from_scores(raw_scores: Vec<f64>) -> Result<Self> {
        if raw_scores.is_empty() {
            return Err(Error::InsufficientData("no scores to bin".into()));
        }
        let mut bins = vec![0.0; BIN_COUNT];
        let w = 1.0 / raw_scores.len() as f64;
        for &s in &raw_scores {
            if !(0.0..=100.0 + 1e-9).contains(&s) {
                return Err(Error::Invalid(format!("score {s} outside [0, 100]")));
            }
            bins[(s.round() as usize).min(BIN_COUNT - 1)] += w;
        }
        Ok(Self { bins, raw_scores })
    }

    pub fn mean(&self) -> f64 {
        self.raw_scores.iter().sum::<f64>() / self.raw_scores.len() as f64
    }
}

/// Score distribution from a precomputed mastery matrix (one row per
/// student).
pub fn score_distribution(
    masteries: &[Vec<f64>],
    script: &ExamScript,
    course: &Course,
) -> Result<ScoreDistribution> {
    let full = script.full_score(course);
    if full <= 0.0 {
        return Err(Error::Invalid("script has zero total score".into()));
    }
    for m in masteries {
        dim_check("mastery length", course.kp_count(), m.len())?;
    }
    let scores = masteries
        .iter()
        .map(|m| script_score(m, script, course) / full * 100.0)
        .collect();
    ScoreDistribution::from_scores(scores)
}

pub fn class_score_distribution(
    roster: &ClassRoster,
    model: &DktModel,
    script: &ExamScript,
    course: &Course,
) -> Result<ScoreDistribution> {
    if roster.is_empty() {
        return Err(Error::InsufficientData("empty class".into()));
    }
    let masteries = predict_class(model, &roster.histories, course)?;
    score_distribution(&masteries, script, course)
}

/// Class mean score over 100.
pub fn difficulty(dist: &ScoreDistribution) -> f64 {
    dist.mean() / 100.0
}

/// `(P_H − P_L)/100` over the top and bottom `max(1, ⌊0.27·|S|⌋)` scores.
pub fn distinguishability(dist: &ScoreDistribution) -> Result<f64> {
    distinguishability_of(&dist.raw_scores)
}

pub fn distinguishability_of(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InsufficientData(
            "distinguishability needs at least two students".into(),
        ));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = ((EXTREME_GROUP_SHARE * sorted.len() as f64).floor() as usize).max(1);
    let low = sorted[..t].iter().sum::<f64>() / t as f64;
    let high = sorted[sorted.len() - t..].iter().sum::<f64>() / t as f64;
    Ok((high - low) / 100.0)
}

/// KP occurrence counts over the script's questions.
pub fn script_kp_frequency(script: &ExamScript, course: &Course) -> Vec<f64> {
    let mut freq = vec![0.0; course.kp_count()];
    for &i in script.questions() {
        for &k in &course.question(i).kps {
            freq[k] += 1.0;
        }
    }
    freq
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    Ok(crate::neural::dot(a, b) / (na * nb))
}

/// Cosine similarity between the script's KP frequencies and the bank's.
pub fn validity(script: &ExamScript, course: &Course) -> Result<f64> {
    if script.is_empty() {
        return Err(Error::Invalid("validity of an empty script".into()));
    }
    cosine_similarity(&script_kp_frequency(script, course), course.kp_weights())
}

/// Normal distribution truncated to [0, 100] and discretized onto the 101
/// integer score bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub bins: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::Invalid(format!("bad target N({mu}, {sigma})")));
        }
        let n = StatNormal::new(mu, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut bins: Vec<f64> = (0..BIN_COUNT)
            .map(|i| {
                let lo = (i as f64 - 0.5).max(0.0);
                let hi = (i as f64 + 0.5).min(100.0);
                n.cdf(hi) - n.cdf(lo)
            })
            .collect();
        let total: f64 = bins.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid(format!(
                "N({mu}, {sigma}) has no mass on [0, 100]"
            )));
        }
        bins.iter_mut().for_each(|b| *b /= total);
        Ok(Self { mu, sigma, bins })
    }
}

impl Default for TargetDistribution {
    fn default() -> Self {
        Self::new(70.0, 15.0).expect("default target is valid")
    }
}

/// `KL(p ‖ q)` after adding `eps` to every bin of both and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    dim_check("histogram bins", p.len(), q.len())?;
    let zp = 1.0 + eps * p.len() as f64;
    let zq = 1.0 + eps * q.len() as f64;
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let a = (a + eps) / zp;
        let b = (b + eps) / zq;
        if a > 0.0 {
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// `1 − KL(P ‖ Z)` with [`KL_EPSILON`] smoothing.
pub fn rationality(dist: &ScoreDistribution, target: &TargetDistribution) -> f64 {
    rationality_bins(&dist.bins, &target.bins, KL_EPSILON)
}

pub fn rationality_bins(p: &[f64], z: &[f64], eps: f64) -> f64 {
    1.0 - kl_divergence(p, z, eps).expect("score histograms share the bin layout")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityBand {
    Discard,
    Passable,
    Qualified,
    Excellent,
}

impl fmt::Display for QualityBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityBand::Excellent => "excellent",
            QualityBand::Qualified => "qualified",
            QualityBand::Passable => "passable",
            QualityBand::Discard => "discard",
        })
    }
}

/// Grades a distinguishability value: above 0.39 excellent, 0.30–0.39
/// qualified, 0.20–0.29 passable, below 0.20 discard.
pub fn quality_band(distinguishability: f64) -> QualityBand {
    if distinguishability > 0.39 {
        QualityBand::Excellent
    } else if distinguishability >= 0.30 {
        QualityBand::Qualified
    } else if distinguishability >= 0.20 {
        QualityBand::Passable
    } else {
        QualityBand::Discard
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub difficulty: f64,
    pub distinguishability: f64,
    pub validity: f64,
    pub rationality: f64,
    pub band: QualityBand,
    pub histogram: Vec<f64>,
}

/// All four metrics of `script` for a class given its mastery matrix.
pub fn assess_script(
    masteries: &[Vec<f64>],
    script: &ExamScript,
    course: &Course,
    target: &TargetDistribution,
) -> Result<QualityReport> {
    let dist = score_distribution(masteries, script, course)?;
    let dis = distinguishability(&dist)?;
    Ok(QualityReport {
        difficulty: difficulty(&dist),
        distinguishability: dis,
        validity: validity(script, course)?,
        rationality: rationality(&dist, target),
        band: quality_band(dis),
        histogram: dist.bins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSolution {
    /// σ solving `σ²·f(α)/F(α) = 100·target` with `α = μ − 1.103063σ`.
    pub sigma_lower_bound: f64,
    /// σ from the untruncated tail-mean identity `2σφ(z*)/0.27 = 100·target`,
    /// `z* = Φ⁻¹(0.73)`.
    pub sigma_exact: f64,
}

/// Standard deviation of the target score distribution needed for a given
/// distinguishability, by two routes.
pub fn solve_sigma(mu: f64, target_dis: f64) -> Result<SigmaSolution> {
    if !(0.0 < mu && mu < 100.0) {
        return Err(Error::Invalid(format!("mu {mu} outside (0, 100)")));
    }
    if target_dis <= 0.0 {
        return Ok(SigmaSolution {
            sigma_lower_bound: 0.0,
            sigma_exact: 0.0,
        });
    }
    let spread = target_dis * 100.0;
    let std = StatNormal::standard();
    let z_star = std.inverse_cdf(1.0 - EXTREME_GROUP_SHARE);
    let sigma_exact = spread * EXTREME_GROUP_SHARE / (2.0 * std.pdf(z_star));

    let bound = |sigma: f64| {
        let n = StatNormal::new(mu, sigma).expect("positive sigma");
        let alpha = mu + LOWER_TAIL_Z * sigma;
        sigma * sigma * n.pdf(alpha) / n.cdf(alpha) - spread
    };
    let sigma_lower_bound = bisect(bound, 1e-6, 1e3, 1e-12)?;
    Ok(SigmaSolution {
        sigma_lower_bound,
        sigma_exact,
    })
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return Err(Error::NoBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || hi - lo < tol {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Empirical distinguishability of `samples` draws from `N(mu, sigma)`
/// truncated to [0, 100].
pub fn verify_sigma_montecarlo(mu: f64, sigma: f64, samples: usize, seed: u64) -> Result<f64> {
    if samples < 1000 {
        return Err(Error::Invalid(format!("need at least 1000 samples, got {samples}")));
    }
    if !(0.0..=100.0).contains(&mu) {
        return Err(Error::Invalid(format!("mu {mu} outside [0, 100]")));
    }
    if sigma <= 0.0 {
        return distinguishability_of(&vec![mu; samples]);
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(samples);
    while draws.len() < samples {
        let x = normal.sample(&mut rng);
        if (0.0..=100.0).contains(&x) {
            draws.push(x);
        }
    }
    distinguishability_of(&draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Question;

    fn course_two_kp() -> Course {
        // C_p = (4, 1)
        let qub = vec![
            Question::new(0, vec![0], 2.5, None).unwrap(),
            Question::new(1, vec![0], 2.5, None).unwrap(),
            Question::new(2, vec![0], 2.5, None).unwrap(),
            Question::new(3, vec![0, 1], 2.5, None).unwrap(),
        ];
        Course::new(2, qub, vec![]).unwrap()
    }

    #[test]
    fn question_score_cases() {
        let q = Question::new(
            0,
            vec![0, 1],
            2.5,
            Some([(0, 1.5), (1, 1.0)].into_iter().collect()),
        )
        .unwrap();
        assert_eq!(question_score(&[1.0, 1.0], &q), 2.5);
        assert_eq!(question_score(&[0.0, 0.0], &q), 0.0);
        assert!((question_score(&[0.8, 0.4], &q) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn script_scores() {
        let c = course_two_kp();
        let empty = ExamScript::new(vec![], &c).unwrap();
        assert_eq!(script_score(&[0.3, 0.3], &empty, &c), 0.0);
        let one = ExamScript::new(vec![3], &c).unwrap();
        assert_eq!(
            script_score(&[0.3, 0.9], &one, &c),
            question_score(&[0.3, 0.9], c.question(3))
        );
    }

    #[test]
    fn forty_questions_at_full_mastery_score_100() {
        let qub = (0..40)
            .map(|i| Question::new(i, vec![0], 2.5, None).unwrap())
            .collect();
        let c = Course::new(1, qub, vec![]).unwrap();
        let s = ExamScript::new((0..40).collect(), &c).unwrap();
        assert!((script_score(&[1.0], &s, &c) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn script_rejects_duplicates_and_out_of_range() {
        let c = course_two_kp();
        assert!(ExamScript::new(vec![1, 1], &c).is_err());
        assert!(ExamScript::new(vec![9], &c).is_err());
    }

    #[test]
    fn histogram_cases() {
        let d = ScoreDistribution::from_scores(vec![70.0]).unwrap();
        assert_eq!(d.bins[70], 1.0);
        let d = ScoreDistribution::from_scores(vec![60.0, 80.0]).unwrap();
        assert_eq!(d.bins[60], 0.5);
        assert_eq!(d.bins[80], 0.5);
        assert!(ScoreDistribution::from_scores(vec![101.0]).is_err());
    }

    #[test]
    fn zero_score_script_is_an_error() {
        let qub = vec![Question::new(0, vec![0], 0.0, None).unwrap()];
        let c = Course::new(1, qub, vec![]).unwrap();
        let s = ExamScript::new(vec![0], &c).unwrap();
        assert!(score_distribution(&[vec![0.5]], &s, &c).is_err());
    }

    #[test]
    fn difficulty_cases() {
        let d = ScoreDistribution::from_scores(vec![100.0; 5]).unwrap();
        assert_eq!(difficulty(&d), 1.0);
        let d = ScoreDistribution::from_scores(vec![50.0, 90.0]).unwrap();
        assert!((difficulty(&d) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn distinguishability_cases() {
        assert_eq!(distinguishability_of(&[55.0; 10]).unwrap(), 0.0);
        let ten: Vec<f64> = (1..=10).map(|i| 10.0 * i as f64).collect();
        assert!((distinguishability_of(&ten).unwrap() - 0.8).abs() < 1e-12);
        assert!(distinguishability_of(&[1.0]).is_err());
    }

    #[test]
    fn distinguishability_of_uniform_scores() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() * 100.0).collect();
        // order statistics: top/bottom 27% means are 86.5 and 13.5
        let d = distinguishability_of(&s).unwrap();
        assert!((d - 0.73).abs() < 0.01, "{d}");
    }

    #[test]
    fn validity_cases() {
        let c = course_two_kp();
        let all = ExamScript::new(vec![0, 1, 2, 3], &c).unwrap();
        assert!((validity(&all, &c).unwrap() - 1.0).abs() < 1e-12);
        let only_k0 = ExamScript::new(vec![0], &c).unwrap();
        let want = 4.0 / 17f64.sqrt();
        assert!((validity(&only_k0, &c).unwrap() - want).abs() < 1e-12);
        assert!(validity(&ExamScript::new(vec![], &c).unwrap(), &c).is_err());
    }

    #[test]
    fn target_bins_sum_to_one() {
        let z = TargetDistribution::default();
        assert_eq!(z.bins.len(), BIN_COUNT);
        assert!((z.bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = z
            .bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 70);
    }

    #[test]
    fn rationality_of_target_itself_is_one() {
        let z = TargetDistribution::default();
        assert_eq!(rationality_bins(&z.bins, &z.bins, 0.0), 1.0);
        assert!((rationality_bins(&z.bins, &z.bins, KL_EPSILON) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rationality_of_point_mass() {
        let z = TargetDistribution::default();
        let d = ScoreDistribution::from_scores(vec![70.0]).unwrap();
        let r = rationality(&d, &z);
        // direct sum over bins
        let n = BIN_COUNT as f64;
        let mut kl = 0.0;
        for i in 0..BIN_COUNT {
            let p = (d.bins[i] + KL_EPSILON) / (1.0 + n * KL_EPSILON);
            let q = (z.bins[i] + KL_EPSILON) / (1.0 + n * KL_EPSILON);
            kl += p * (p / q).ln();
        }
        assert!((r - (1.0 - kl)).abs() < 1e-12);
        assert!(r < 1.0);
    }

    #[test]
    fn kl_is_not_symmetric() {
        let z = TargetDistribution::default();
        let p = ScoreDistribution::from_scores(vec![40.0, 60.0, 70.0, 71.0]).unwrap();
        let a = kl_divergence(&p.bins, &z.bins, KL_EPSILON).unwrap();
        let b = kl_divergence(&z.bins, &p.bins, KL_EPSILON).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn bands() {
        assert_eq!(quality_band(0.40), QualityBand::Excellent);
        assert_eq!(quality_band(0.35), QualityBand::Qualified);
        assert_eq!(quality_band(0.25), QualityBand::Passable);
        assert_eq!(quality_band(0.10), QualityBand::Discard);
    }

    #[test]
    fn sigma_solutions() {
        let s = solve_sigma(70.0, 0.39).unwrap();
        let phi = (-0.5f64 * 0.6128 * 0.6128).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let oracle = 39.0 / (2.0 * phi / 0.27);
        assert!((s.sigma_exact - oracle).abs() < 0.01, "{} vs {oracle}", s.sigma_exact);
        assert!((15.9..16.0).contains(&s.sigma_exact));
        // the bound is linear in σ: σ·φ(−1.103063)/Φ(−1.103063) = 39
        let std = StatNormal::standard();
        let lin = 39.0 * std.cdf(LOWER_TAIL_Z) / std.pdf(LOWER_TAIL_Z);
        assert!((s.sigma_lower_bound - lin).abs() < 1e-6);
        let zero = solve_sigma(70.0, 0.0).unwrap();
        assert_eq!(zero.sigma_exact, 0.0);
        assert!(solve_sigma(120.0, 0.39).is_err());
    }

    #[test]
    fn montecarlo_sigma() {
        assert!(verify_sigma_montecarlo(70.0, 0.0, 1000, 1).unwrap().abs() < 1e-12);
        assert!(verify_sigma_montecarlo(70.0, 1e-6, 1000, 1).unwrap() < 1e-6);
        assert!(verify_sigma_montecarlo(70.0, 15.0, 10, 1).is_err());
    }
}
