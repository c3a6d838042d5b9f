//! Conditional GAN over question-selection vectors.
//!
//! The generator maps noise and a class condition to one score per bank
//! question; the discriminator judges `(condition, selection vector)` pairs.
//! Scripts are read off the generator by taking the `n` highest scores.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assess::ExamScript;
use crate::error::{dim_check, Error, Result};
use crate::neural::{dropout_mask, sgd_update, Activation, DenseLayer, Direction, Parameters};
use crate::seeding::{Condition, TrainingInstance};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub noise_dim: usize,
    pub generator_hidden: usize,
    pub discriminator_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on discriminator updates per generator update.
    pub d_steps_per_g_step: usize,
    /// The inner discriminator loop also stops once its objective changes
    /// by less than this relative amount.
    pub d_convergence_tol: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout: 0.3,
            noise_dim: 32,
            generator_hidden: 128,
            discriminator_hidden: 64,
            epochs: 500,
            batch_size: 16,
            d_steps_per_g_step: 3,
            d_convergence_tol: 1e-4,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("GAN learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid("GAN dropout must be in [0, 1)".into()));
        }
        if self.noise_dim == 0
            || self.generator_hidden == 0
            || self.discriminator_hidden == 0
            || self.batch_size == 0
            || self.d_steps_per_g_step == 0
        {
            return Err(Error::Invalid("GAN sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// `(z ⊕ c) → hidden`, sigmoid.
    pub layer1: DenseLayer,
    /// `hidden → |QuB|`, tanh.
    pub layer2: DenseLayer,
    pub noise_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    /// `(c ⊕ v) → hidden`, sigmoid.
    pub layer1: DenseLayer,
    /// `hidden → 1`, sigmoid.
    pub layer2: DenseLayer,
}

/// Forward intermediates of a two-layer net with dropout on the hidden
/// activations.
#[derive(Debug, Clone)]
pub struct TwoLayerPass {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub dropped: Vec<f64>,
    pub output: Vec<f64>,
}

fn two_layer_forward(
    l1: &DenseLayer,
    l2: &DenseLayer,
    input: Vec<f64>,
    mask: Option<Vec<f64>>,
) -> TwoLayerPass {
    let hidden = l1.forward_unchecked(&input);
    let dropped = match &mask {
        Some(m) => hidden.iter().zip(m).map(|(h, k)| h * k).collect(),
        None => hidden.clone(),
    };
    let output = l2.forward_unchecked(&dropped);
    TwoLayerPass {
        input,
        hidden,
        mask,
        dropped,
        output,
    }
}

/// Accumulates parameter gradients into `(acc1, acc2)` and returns the
/// gradient with respect to the input.
fn two_layer_backward(
    l1: &DenseLayer,
    l2: &DenseLayer,
    pass: &TwoLayerPass,
    d_output: &[f64],
    acc1: &mut DenseLayer,
    acc2: &mut DenseLayer,
) -> Vec<f64> {
    let mut d_hidden = l2.backward_acc(&pass.dropped, &pass.output, d_output, acc2);
    if let Some(m) = &pass.mask {
        d_hidden.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
    }
    l1.backward_acc(&pass.input, &pass.hidden, &d_hidden, acc1)
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        noise_dim: usize,
        condition_dim: usize,
        hidden: usize,
        bank_size: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layer1: DenseLayer::new(noise_dim + condition_dim, hidden, Activation::Sigmoid, rng),
            layer2: DenseLayer::new(hidden, bank_size, Activation::Tanh, rng),
            noise_dim,
        }
    }

    pub fn bank_size(&self) -> usize {
        self.layer2.output_dim()
    }

    pub fn condition_dim(&self) -> usize {
        self.layer1.input_dim() - self.noise_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
            noise_dim: self.noise_dim,
        }
    }

    fn check(&self, z: &[f64], c: &Condition) -> Result<()> {
        dim_check("generator noise", self.noise_dim, z.len())?;
        dim_check("generator condition", self.condition_dim(), c.values.len())
    }

    pub fn pass(&self, z: &[f64], c: &Condition, mask: Option<Vec<f64>>) -> TwoLayerPass {
        let input = [z, &c.values[..]].concat();
        two_layer_forward(&self.layer1, &self.layer2, input, mask)
    }

    /// Backward from `d/d(prob)` of the `[0,1]` output; returns nothing
    /// since noise and condition are not trained.
    pub fn backward(&self, pass: &TwoLayerPass, d_prob: &[f64], acc: &mut Generator) {
        let d_tanh: Vec<f64> = d_prob.iter().map(|d| 0.5 * d).collect();
        two_layer_backward(
            &self.layer1,
            &self.layer2,
            pass,
            &d_tanh,
            &mut acc.layer1,
            &mut acc.layer2,
        );
    }
}

/// Maps the tanh output onto `[0, 1]`.
pub fn to_probability(tanh_out: &[f64]) -> Vec<f64> {
    tanh_out.iter().map(|x| 0.5 * (x + 1.0)).collect()
}

/// Selection probabilities over the bank, without dropout.
pub fn gen_forward(g: &Generator, z: &[f64], c: &Condition) -> Result<Vec<f64>> {
    g.check(z, c)?;
    Ok(to_probability(&g.pass(z, c, None).output))
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        condition_dim: usize,
        bank_size: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layer1: DenseLayer::new(condition_dim + bank_size, hidden, Activation::Sigmoid, rng),
            layer2: DenseLayer::new(hidden, 1, Activation::Sigmoid, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
        }
    }

    pub fn pass(&self, c: &Condition, v: &[f64], mask: Option<Vec<f64>>) -> TwoLayerPass {
        let input = [&c.values[..], v].concat();
        two_layer_forward(&self.layer1, &self.layer2, input, mask)
    }

    /// Returns the gradient with respect to `(c ⊕ v)`.
    pub fn backward(&self, pass: &TwoLayerPass, d_out: f64, acc: &mut Discriminator) -> Vec<f64> {
        two_layer_backward(
            &self.layer1,
            &self.layer2,
            pass,
            &[d_out],
            &mut acc.layer1,
            &mut acc.layer2,
        )
    }
}

pub fn disc_forward(d: &Discriminator, c: &Condition, v: &[f64]) -> Result<f64> {
    dim_check("discriminator input", d.layer1.input_dim(), c.values.len() + v.len())?;
    Ok(d.pass(c, v, None).output[0])
}

macro_rules! two_layer_params {
    ($t:ty) => {
        impl Parameters for $t {
            fn param_slices(&self) -> Vec<&[f64]> {
                let mut v = self.layer1.param_slices();
                v.extend(self.layer2.param_slices());
                v
            }

            fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
                let mut v = self.layer1.param_slices_mut();
                v.extend(self.layer2.param_slices_mut());
                v
            }
        }
    };
}

two_layer_params!(Generator);
two_layer_params!(Discriminator);

pub fn sample_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Top-`n` questions by generator score, ties broken by lower bank index.
pub fn top_n(scores: &[f64], n: usize) -> Result<ExamScript> {
    if n > scores.len() {
        return Err(Error::Invalid(format!(
            "cannot pick {n} questions from a bank of {}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(ExamScript::from_sorted_unchecked(idx))
}

/// One noise draw from `seed`, then the top `n` questions.
pub fn generate_script(g: &Generator, c: &Condition, n: usize, seed: u64) -> Result<ExamScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_noise(g.noise_dim, &mut rng);
    top_n(&gen_forward(g, &z, c)?, n)
}

fn mask_for<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Option<Vec<f64>> {
    (rate > 0.0).then(|| dropout_mask(len, rate, rng))
}

/// A generated sample kept for the discriminator update.
struct Fake {
    condition: Condition,
    probs: Vec<f64>,
}

fn generate_fakes<R: Rng + ?Sized>(
    g: &Generator,
    conditions: &[&Condition],
    dropout: f64,
    rng: &mut R,
) -> Vec<Fake> {
    let hidden = g.layer1.output_dim();
    conditions
        .iter()
        .map(|&c| {
            let z = sample_noise(g.noise_dim, rng);
            let mask = mask_for(hidden, dropout, rng);
            Fake {
                condition: c.clone(),
                probs: to_probability(&g.pass(&z, c, mask).output),
            }
        })
        .collect()
}

/// One ascent step on `mean log D(real) + Σ_fakes mean log(1 − D(fake))`.
/// Returns the objective before the step.
fn discriminator_step<R: Rng + ?Sized>(
    d: &mut Discriminator,
    real: &[(&Condition, Vec<f64>)],
    fakes: &[Vec<Fake>],
    config: &GanConfig,
    rng: &mut R,
) -> Result<f64> {
    let hidden = d.layer1.output_dim();
    let mut grads = d.zeros_like();
    let mut objective = 0.0;
    let inv_real = 1.0 / real.len() as f64;
    for (c, v) in real {
        let pass = d.pass(c, v, mask_for(hidden, config.dropout, rng));
        let p = pass.output[0].max(PROB_FLOOR);
        objective += p.ln() * inv_real;
        d.backward(&pass, inv_real / p, &mut grads);
    }
    for batch in fakes {
        let inv = 1.0 / batch.len() as f64;
        for f in batch {
            let pass = d.pass(&f.condition, &f.probs, mask_for(hidden, config.dropout, rng));
            let q = (1.0 - pass.output[0]).max(PROB_FLOOR);
            objective += q.ln() * inv;
            d.backward(&pass, -inv / q, &mut grads);
        }
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite(format!("discriminator objective {objective}")));
    }
    sgd_update(d, &grads, config.learning_rate, Direction::Ascent);
    Ok(objective)
}

/// Gradient of `mean log D(G(z|c)|c)` with respect to the generator.
fn generator_gradient<R: Rng + ?Sized>(
    g: &Generator,
    d: &Discriminator,
    conditions: &[&Condition],
    dropout: f64,
    rng: &mut R,
) -> Result<(Generator, f64)> {
    let g_hidden = g.layer1.output_dim();
    let d_hidden = d.layer1.output_dim();
    let cond_dim = g.condition_dim();
    let mut grads = g.zeros_like();
    let mut scratch = d.zeros_like();
    let mut objective = 0.0;
    let inv = 1.0 / conditions.len() as f64;
    for &c in conditions {
        let z = sample_noise(g.noise_dim, rng);
        let gp = g.pass(&z, c, mask_for(g_hidden, dropout, rng));
        let probs = to_probability(&gp.output);
        let dp = d.pass(c, &probs, mask_for(d_hidden, dropout, rng));
        let p = dp.output[0].max(PROB_FLOOR);
        objective += p.ln() * inv;
        let d_input = d.backward(&dp, inv / p, &mut scratch);
        g.backward(&gp, &d_input[cond_dim..], &mut grads);
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite(format!("generator objective {objective}")));
    }
    Ok((grads, objective))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// `−V_D` averaged over the epoch's discriminator steps.
    pub d_loss: f64,
    /// `−V_G` averaged over the epoch's generator steps.
    pub g_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedGan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub losses: Vec<EpochLoss>,
    /// Epoch whose generator was kept when training was monitored.
    pub selected_epoch: Option<usize>,
}

pub fn init_models(
    condition_dim: usize,
    bank_size: usize,
    config: &GanConfig,
    rng: &mut ChaCha8Rng,
) -> (Generator, Discriminator) {
    let g = Generator::new(
        config.noise_dim,
        condition_dim,
        config.generator_hidden,
        bank_size,
        rng,
    );
    let d = Discriminator::new(condition_dim, bank_size, config.discriminator_hidden, rng);
    (g, d)
}

pub(crate) fn condition_dim_of(data: &[TrainingInstance]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::InsufficientData("no training instances".into()))?;
    let cond_dim = first.condition.values.len();
    if data.iter().any(|i| i.condition.values.len() != cond_dim) {
        return Err(Error::Dimension("training conditions differ in length".into()));
    }
    Ok(cond_dim)
}

/// Alternating training: for each batch, the discriminator ascends its
/// objective until it stalls or hits `d_steps_per_g_step`, then the
/// generator takes one ascent step on `log D(G(z|c)|c)`.
pub fn train_examgan(
    data: &[TrainingInstance],
    bank_size: usize,
    config: &GanConfig,
    seed: u64,
) -> Result<TrainedGan> {
    train_examgan_monitored(data, bank_size, config, seed, 0, &mut |_, _| None)
}

/// Like [`train_examgan`], but every `every` epochs calls `monitor` with the
/// current generator and keeps the generator with the highest returned
/// score. `every == 0` disables monitoring.
pub fn train_examgan_monitored(
    data: &[TrainingInstance],
    bank_size: usize,
    config: &GanConfig,
    seed: u64,
    every: usize,
    monitor: &mut dyn FnMut(usize, &Generator) -> Option<f64>,
) -> Result<TrainedGan> {
    config.validate()?;
    let cond_dim = condition_dim_of(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, d) = init_models(cond_dim, bank_size, config, &mut rng);
    continue_examgan(data, g, d, config, &mut rng, every, monitor)
}

/// Trains already-initialized models.
pub fn continue_examgan(
    data: &[TrainingInstance],
    mut g: Generator,
    mut d: Discriminator,
    config: &GanConfig,
    rng: &mut ChaCha8Rng,
    every: usize,
    monitor: &mut dyn FnMut(usize, &Generator) -> Option<f64>,
) -> Result<TrainedGan> {
    let targets: Vec<Vec<f64>> = data
        .iter()
        .map(|i| i.target_vector(g.bank_size()))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Generator)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut d_sum, mut d_n, mut g_sum, mut g_n) = (0.0, 0usize, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let real: Vec<(&Condition, Vec<f64>)> = batch
                .iter()
                .map(|&i| (&data[i].condition, targets[i].clone()))
                .collect();
            let conditions: Vec<&Condition> = real.iter().map(|r| r.0).collect();
            let mut last: Option<f64> = None;
            for _ in 0..config.d_steps_per_g_step {
                let fakes = generate_fakes(&g, &conditions, config.dropout, rng);
                let obj = discriminator_step(&mut d, &real, &[fakes], config, rng)?;
                d_sum += obj;
                d_n += 1;
                if let Some(prev) = last {
                    if ((obj - prev) / prev.abs().max(PROB_FLOOR)).abs() < config.d_convergence_tol {
                        break;
                    }
                }
                last = Some(obj);
            }
            let (grads, obj) = generator_gradient(&g, &d, &conditions, config.dropout, rng)?;
            sgd_update(&mut g, &grads, config.learning_rate, Direction::Ascent);
            g_sum += obj;
            g_n += 1;
        }
        losses.push(EpochLoss {
            epoch,
            d_loss: -d_sum / d_n.max(1) as f64,
            g_loss: -g_sum / g_n.max(1) as f64,
        });
        if every > 0 && (epoch + 1) % every == 0 {
            if let Some(score) = monitor(epoch, &g) {
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, epoch, g.clone()));
                }
            }
        }
    }
    let (generator, selected_epoch) = match best {
        Some((_, e, bg)) => (bg, Some(e)),
        None => (g, None),
    };
    Ok(TrainedGan {
        generator,
        discriminator: d,
        losses,
        selected_epoch,
    })
}

/// One discriminator ascent step against fakes from each of `generators`.
pub(crate) fn discriminator_step_against(
    d: &mut Discriminator,
    real: &[(&Condition, Vec<f64>)],
    generators: &[&Generator],
    config: &GanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let conditions: Vec<&Condition> = real.iter().map(|r| r.0).collect();
    let fakes: Vec<Vec<Fake>> = generators
        .iter()
        .map(|g| generate_fakes(g, &conditions, config.dropout, rng))
        .collect();
    discriminator_step(d, real, &fakes, config, rng)
}

/// One generator ascent step on `mean log D(G(z|c)|c)`.
pub(crate) fn generator_step(
    g: &mut Generator,
    d: &Discriminator,
    conditions: &[&Condition],
    config: &GanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (grads, obj) = generator_gradient(g, d, conditions, config.dropout, rng)?;
    sgd_update(g, &grads, config.learning_rate, Direction::Ascent);
    Ok(obj)
}

pub fn write_loss_csv(path: &Path, losses: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "d_loss", "g_loss"])?;
    for l in losses {
        w.write_record(&[l.epoch.to_string(), l.d_loss.to_string(), l.g_loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
