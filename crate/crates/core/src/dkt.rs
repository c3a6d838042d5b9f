//! Deep knowledge tracing: an LSTM over encoded exercise histories whose
//! sigmoid readout gives one mastery probability per knowledge point.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Course, ExerciseRecord, KnowledgePoint, StudentHistories};
use crate::error::{Error, Result};
use crate::neural::{
    clip_global_norm, lstm_bptt, sgd_update, Activation, DenseLayer, Direction, LstmCell,
    Parameters, StepTarget,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktModel {
    pub cell: LstmCell,
    pub readout: DenseLayer,
    pub kp_count: usize,
}

/// One encoded interaction. `x` has `2|K|` slots: the first half marks the
/// exercise's KPs when the answer was correct, the second half when it was
/// not.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStep {
    pub x: Vec<f64>,
    pub target_kps: Vec<KnowledgePoint>,
    pub target_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktConfig {
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Students per gradient step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DktConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            learning_rate: 2.0,
            epochs: 30,
            batch_size: 4,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

pub fn encode_history(history: &[ExerciseRecord], course: &Course) -> Result<Vec<EncodedStep>> {
    let k = course.kp_count();
    history
        .iter()
        .map(|r| {
            let ex = course.exercise(r.exercise).ok_or_else(|| {
                Error::Invalid(format!("unknown exercise {} in history", r.exercise))
            })?;
            let mut x = vec![0.0; 2 * k];
            let offset = if r.correct { 0 } else { k };
            for &kp in &ex.kps {
                if kp >= k {
                    return Err(Error::Invalid(format!("KP {kp} out of range {k}")));
                }
                x[offset + kp] = 1.0;
            }
            Ok(EncodedStep {
                x,
                target_kps: ex.kps.clone(),
                target_correct: r.correct,
            })
        })
        .collect()
}

/// Inputs plus next-step targets for one student's sequence. The last step
/// has nothing to predict.
fn training_sequence(steps: &[EncodedStep]) -> (Vec<Vec<f64>>, Vec<Option<StepTarget>>) {
    let inputs = steps.iter().map(|s| s.x.clone()).collect();
    let targets = (0..steps.len())
        .map(|t| {
            steps.get(t + 1).map(|next| StepTarget {
                outputs: next.target_kps.clone(),
                label: next.target_correct,
            })
        })
        .collect();
    (inputs, targets)
}

impl DktModel {
    pub fn new(kp_count: usize, hidden_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cell = LstmCell::new(2 * kp_count, hidden_size, &mut rng);
        // forget gate starts open
        cell.bias[hidden_size..2 * hidden_size].fill(1.0);
        Self {
            cell,
            readout: DenseLayer::new(hidden_size, kp_count, Activation::Sigmoid, &mut rng),
            kp_count,
        }
    }

    fn run(&self, steps: &[EncodedStep]) -> Vec<f64> {
        let hs = self.cell.hidden_size;
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        if steps.is_empty() {
            let cache = self.cell.step_unchecked(&vec![0.0; 2 * self.kp_count], &h, &c);
            return self.readout.forward_unchecked(&cache.h());
        }
        for s in steps {
            let cache = self.cell.step_unchecked(&s.x, &h, &c);
            h = cache.h();
            c = cache.c;
        }
        self.readout.forward_unchecked(&h)
    }

    /// Per-step probability that the next answer is correct, paired with the
    /// actual outcome.
    pub fn next_step_predictions(&self, steps: &[EncodedStep]) -> Vec<(f64, bool)> {
        let hs = self.cell.hidden_size;
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        let mut out = Vec::with_capacity(steps.len().saturating_sub(1));
        for (t, s) in steps.iter().enumerate() {
            let cache = self.cell.step_unchecked(&s.x, &h, &c);
            h = cache.h();
            c = cache.c;
            if let Some(next) = steps.get(t + 1) {
                let y = self.readout.forward_unchecked(&h);
                let p = next.target_kps.iter().map(|&k| y[k]).sum::<f64>()
                    / next.target_kps.len() as f64;
                out.push((p, next.target_correct));
            }
        }
        out
    }
}

impl Parameters for DktModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.cell.param_slices();
        v.extend(self.readout.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.cell.param_slices_mut();
        v.extend(self.readout.param_slices_mut());
        v
    }
}

/// Mastery vector `p_{s,K}` read from the readout after the full history.
/// An empty history gets one step with zero input from the zero state.
pub fn predict_mastery(
    model: &DktModel,
    history: &[ExerciseRecord],
    course: &Course,
) -> Result<Vec<f64>> {
    if course.kp_count() != model.kp_count {
        return Err(Error::Dimension(format!(
            "model has {} KPs, course has {}",
            model.kp_count,
            course.kp_count()
        )));
    }
    let steps = encode_history(history, course)?;
    Ok(model.run(&steps))
}

/// Mastery of every student in a class (the knowledge mastery matrix, one
/// row per student).
pub fn predict_class(
    model: &DktModel,
    histories: &[Vec<ExerciseRecord>],
    course: &Course,
) -> Result<Vec<Vec<f64>>> {
    histories
        .par_iter()
        .map(|h| predict_mastery(model, h, course))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktTrace {
    /// Mean per-prediction cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
}

pub fn train_dkt(
    histories: &StudentHistories,
    course: &Course,
    config: &DktConfig,
) -> Result<(DktModel, DktTrace)> {
    let sequences: Vec<_> = histories
        .values()
        .filter(|h| h.len() >= 2)
        .map(|h| encode_history(h, course).map(|s| training_sequence(&s)))
        .collect::<Result<_>>()?;
    if sequences.is_empty() {
        return Err(Error::InsufficientData(
            "need at least one student with two or more records".into(),
        ));
    }
    let mut model = DktModel::new(course.kp_count(), config.hidden_size, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut trace = DktTrace {
        epoch_loss: Vec::with_capacity(config.epochs),
    };
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut total_steps = 0usize;
        for chunk in order.chunks(batch) {
            let grads: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    let (x, y) = &sequences[i];
                    lstm_bptt(&model.cell, &model.readout, x, y)
                })
                .collect::<Result<_>>()?;
            let mut cell_g = model.cell.zeros_like();
            let mut read_g = model.readout.zeros_like();
            let mut steps = 0;
            for g in &grads {
                total_loss += g.loss;
                steps += g.scored_steps;
                cell_g.add_params(&g.cell);
                read_g.add_params(&g.readout);
            }
            if steps == 0 {
                continue;
            }
            total_steps += steps;
            let inv = 1.0 / steps as f64;
            cell_g.scale_params(inv);
            read_g.scale_params(inv);
            clip_global_norm(&mut [&mut cell_g, &mut read_g], config.clip_norm);
            sgd_update(&mut model.cell, &cell_g, config.learning_rate, Direction::Descent);
            sgd_update(
                &mut model.readout,
                &read_g,
                config.learning_rate,
                Direction::Descent,
            );
        }
        let mean = total_loss / total_steps.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("DKT epoch {epoch} loss {mean}")));
        }
        log::debug!("dkt epoch {epoch}: loss {mean:.5}");
        trace.epoch_loss.push(mean);
    }
    Ok((model, trace))
}

/// Rank-based AUC (Mann-Whitney statistic, ties get the average rank).
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData(
            "AUC needs both positive and negative outcomes".into(),
        ));
    }
    let mut sorted: Vec<_> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks are 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * sorted[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of next-answer predictions over held-out students.
pub fn evaluate_auc(
    model: &DktModel,
    heldout: &StudentHistories,
    course: &Course,
) -> Result<f64> {
    let scored: Vec<_> = heldout
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|h| encode_history(h, course).map(|s| model.next_step_predictions(&s)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    auc(&scored)
}
