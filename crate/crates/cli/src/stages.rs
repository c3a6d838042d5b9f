//! Pipeline stages. Every stage reads its inputs from the run directory and
//! writes its outputs there, so subcommands and the full pipeline share the
//! same code path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scriptgen_core::assess::{assess_script, ExamScript, TargetDistribution};
use scriptgen_core::baselines::ga_generate_from_masteries;
use scriptgen_core::data::{
    form_class_ids, group_by_student, load_course, load_records, synth_cohort, write_exercise_bank,
    write_question_bank, write_records, Course, StudentHistories, StudentId,
};
use scriptgen_core::dkt::{predict_mastery, train_dkt, DktModel};
use scriptgen_core::gan::{generate_script, train_examgan_monitored, write_loss_csv, TrainedGan};
use scriptgen_core::neural::{load_checkpoint, save_checkpoint};
use scriptgen_core::seeding::{
    condition_from_masteries, derive_seed, read_training_data, sample_and_filter,
    training_data_from_masteries, write_training_data, Condition, SeedingConfig,
};
use scriptgen_core::twin::{generate_pair, init_twin, run_s1, run_s2, Strategy, TwinModel};

use crate::config::{Method, RunConfig};
use crate::report::{export_plots, EvaluationReport, PairEntry, ScriptEntry};

pub const QUESTION_BANK: &str = "question_bank.jsonl";
pub const EXERCISE_BANK: &str = "exercise_bank.jsonl";
pub const RECORDS: &str = "records.csv";
pub const DKT_MODEL: &str = "dkt.json";
pub const DKT_LOSS: &str = "dkt_loss.csv";
pub const MASTERIES: &str = "masteries.jsonl";
pub const CLASSES: &str = "classes.json";
pub const TRAINING_DATA: &str = "training_data.jsonl";
pub const EXAMGAN: &str = "examgan.json";
pub const EXAMGAN_LOSS: &str = "examgan_loss.csv";
pub const EVALUATION: &str = "evaluation.json";
pub const PLOTS_DIR: &str = "plots";
pub const MANIFEST: &str = "manifest.json";

/// Seed streams, one per consumer of randomness.
mod stream {
    pub const SYNTH: u64 = 1;
    pub const DKT: u64 = 2;
    pub const CLASSES: u64 = 3;
    pub const SEEDING: u64 = 4;
    pub const GAN: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const GENERATE: u64 = 7;
    pub const RSF: u64 = 8;
    pub const GA: u64 = 9;
    pub const TWIN: u64 = 10;
    pub const PAIR: u64 = 11;
}

pub fn twin_file(strategy: Strategy) -> String {
    format!("texamgan_{}.json", format!("{strategy:?}").to_lowercase())
}

/// The run directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn require(&self, name: &str, stage: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("{} is missing; run `{stage}` first", p.display());
        }
        Ok(p)
    }

    pub fn course(&self) -> anyhow::Result<Course> {
        let q = self.require(QUESTION_BANK, "synth` or `ingest")?;
        let e = self.require(EXERCISE_BANK, "synth` or `ingest")?;
        Ok(load_course(&q, &e)?)
    }

    pub fn histories(&self, course: &Course) -> anyhow::Result<StudentHistories> {
        let r = self.require(RECORDS, "synth` or `ingest")?;
        let loaded = load_records(&r, course)?;
        Ok(group_by_student(&loaded.records))
    }

    pub fn dkt(&self) -> anyhow::Result<DktModel> {
        Ok(load_checkpoint(&self.require(DKT_MODEL, "train-dkt")?)?)
    }

    pub fn masteries(&self) -> anyhow::Result<BTreeMap<StudentId, Vec<f64>>> {
        read_masteries(&self.require(MASTERIES, "train-dkt")?)
    }

    pub fn classes(&self) -> anyhow::Result<ClassSplit> {
        let text = std::fs::read_to_string(self.require(CLASSES, "seed")?)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn examgan(&self) -> anyhow::Result<TrainedGan> {
        Ok(load_checkpoint(&self.require(EXAMGAN, "train-examgan")?)?)
    }

    pub fn twin(&self, strategy: Strategy) -> anyhow::Result<TwinModel> {
        Ok(TwinModel::load(&self.require(&twin_file(strategy), "train-texamgan")?)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MasteryLine {
    student: StudentId,
    mastery: Vec<f64>,
}

fn write_masteries(path: &Path, m: &BTreeMap<StudentId, Vec<f64>>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (&student, mastery) in m {
        let line = MasteryLine {
            student,
            mastery: mastery.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

fn read_masteries(path: &Path) -> anyhow::Result<BTreeMap<StudentId, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MasteryLine = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(m.student, m.mastery);
    }
    Ok(out)
}

/// Student ids of every class, by split. Class indices are global: train
/// classes come first, then validation, then test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<Vec<StudentId>>,
    pub validation: Vec<Vec<StudentId>>,
    pub test: Vec<Vec<StudentId>>,
}

impl ClassSplit {
    pub fn first_validation(&self) -> usize {
        self.train.len()
    }

    pub fn first_test(&self) -> usize {
        self.train.len() + self.validation.len()
    }
}

/// Mastery rows of one class.
pub fn class_masteries(
    ids: &[StudentId],
    all: &BTreeMap<StudentId, Vec<f64>>,
) -> anyhow::Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|s| all.get(s).cloned().ok_or_else(|| anyhow!("no mastery for student {s}")))
        .collect()
}

pub fn target_of(cfg: &RunConfig) -> anyhow::Result<TargetDistribution> {
    Ok(TargetDistribution::new(cfg.target_mu, cfg.target_sigma)?)
}

fn timed<T>(name: &str, f: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
    let t = Instant::now();
    let out = f().with_context(|| format!("stage {name} failed"))?;
    info!("stage {name} done in {:.1?}", t.elapsed());
    Ok(out)
}

/// Writes a synthetic course and its exercise records.
pub fn stage_synth(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<()> {
    timed("synth", || {
        let mut synth = cfg.synth.clone();
        synth.seed = derive_seed(cfg.seed, stream::SYNTH, 0);
        let cohort = synth_cohort(&synth)?;
        write_question_bank(&ws.path(QUESTION_BANK), &cohort.course)?;
        write_exercise_bank(&ws.path(EXERCISE_BANK), &cohort.course)?;
        write_records(&ws.path(RECORDS), &cohort.records)?;
        info!(
            "synthetic course: {} KPs, {} questions, {} records",
            cohort.course.kp_count(),
            cohort.course.questions().len(),
            cohort.records.len()
        );
        Ok(())
    })
}

/// Validates external course files and copies them, normalized, into the
/// run directory.
pub fn stage_ingest(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<()> {
    timed("ingest", || {
        let (q, e, r) = match (&cfg.input.question_bank, &cfg.input.exercise_bank, &cfg.input.records) {
            (Some(q), Some(e), Some(r)) => (q, e, r),
            _ => bail!("ingest needs question_bank, exercise_bank and records paths"),
        };
        let course = load_course(q, e)?;
        let loaded = load_records(r, &course)?;
        if loaded.skipped_unknown > 0 {
            log::warn!("skipped {} records with unknown exercise ids", loaded.skipped_unknown);
        }
        write_question_bank(&ws.path(QUESTION_BANK), &course)?;
        write_exercise_bank(&ws.path(EXERCISE_BANK), &course)?;
        write_records(&ws.path(RECORDS), &loaded.records)?;
        Ok(())
    })
}

pub fn stage_data(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<()> {
    if cfg.input.is_synthetic() {
        stage_synth(cfg, ws)
    } else {
        stage_ingest(cfg, ws)
    }
}

/// Trains the knowledge tracer on every student and stores each student's
/// final mastery vector.
pub fn stage_train_dkt(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<()> {
    timed("train-dkt", || {
        let course = ws.course()?;
        let histories = ws.histories(&course)?;
        let mut dkt_cfg = cfg.dkt.clone();
        dkt_cfg.seed = derive_seed(cfg.seed, stream::DKT, 0);
        let (model, trace) = train_dkt(&histories, &course, &dkt_cfg)?;
        save_checkpoint(&ws.path(DKT_MODEL), &model)?;
        let mut w = csv::Writer::from_path(ws.path(DKT_LOSS))?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in trace.epoch_loss.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush()?;
        let rows: Vec<(StudentId, Vec<f64>)> = histories
            .par_iter()
            .map(|(&s, h)| Ok((s, predict_mastery(&model, h, &course)?)))
            .collect::<anyhow::Result<_>>()?;
        write_masteries(&ws.path(MASTERIES), &rows.into_iter().collect())?;
        Ok(())
    })
}

pub fn form_split(cfg: &RunConfig, students: &[StudentId]) -> anyhow::Result<ClassSplit> {
    let (train, val, _) = cfg.split_counts();
    let mut classes = form_class_ids(
        students,
        cfg.class_size,
        cfg.class_count,
        derive_seed(cfg.seed, stream::CLASSES, 0),
    )?;
    let test = classes.split_off(train + val);
    let validation = classes.split_off(train);
    Ok(ClassSplit {
        train: classes,
        validation,
        test,
    })
}

/// Forms the classes and builds training data for the training classes.
pub fn stage_seed(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<()> {
    timed("seed", || {
        let course = ws.course()?;
        let masteries = ws.masteries()?;
        let students: Vec<StudentId> = masteries.keys().copied().collect();
        let split = form_split(cfg, &students)?;
        std::fs::write(ws.path(CLASSES), serde_json::to_string_pretty(&split)? + "\n")?;
        let target = target_of(cfg)?;
        let mut data = Vec::new();
        for (i, ids) in split.train.iter().enumerate() {
            let m = class_masteries(ids, &masteries)?;
            let seed = derive_seed(cfg.seed, stream::SEEDING, i as u64);
            let (instances, _) = training_data_from_masteries(&m, &course, &cfg.seeding, &target, seed)?;
            data.extend(instances);
        }
        write_training_data(&ws.path(TRAINING_DATA), &data, &course)?;
        info!("{} training instances from {} classes", data.len(), split.train.len());
        Ok(())
    })
}

/// Class condition and mastery rows for every class of one split part.
fn part_inputs(
    classes: &[Vec<StudentId>],
    masteries: &BTreeMap<StudentId, Vec<f64>>,
) -> anyhow::Result<Vec<(Condition, Vec<Vec<f64>>)>> {
    classes
        .iter()
        .map(|ids| {
            let m = class_masteries(ids, masteries)?;
            Ok((condition_from_masteries(&m)?, m))
        })
        .collect()
}

/// Trains the conditional GAN, keeping the snapshot with the best mean
/// validation rationality when validation checks are enabled.
pub fn stage_train_examgan(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<()> {
    timed("train-examgan", || {
        let course = ws.course()?;
        let data = read_training_data(&ws.require(TRAINING_DATA, "seed")?, &course)?;
        let split = ws.classes()?;
        let masteries = ws.masteries()?;
        let validation = part_inputs(&split.validation, &masteries)?;
        let target = target_of(cfg)?;
        let n = cfg.seeding.n;
        let first = split.first_validation();
        let mut monitor = |epoch: usize, g: &scriptgen_core::gan::Generator| -> Option<f64> {
            let scores: Vec<f64> = validation
                .par_iter()
                .enumerate()
                .map(|(i, (c, m))| {
                    let seed = derive_seed(cfg.seed, stream::VALIDATION, (first + i) as u64);
                    let script = generate_script(g, c, n, seed).ok()?;
                    Some(assess_script(m, &script, &course, &target).ok()?.rationality)
                })
                .collect::<Option<_>>()?;
            let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
            info!("epoch {epoch}: validation rationality {mean:.4}");
            Some(mean)
        };
        let trained = train_examgan_monitored(
            &data,
            course.questions().len(),
            &cfg.gan,
            derive_seed(cfg.seed, stream::GAN, 0),
            cfg.validation_every,
            &mut monitor,
        )?;
        if let Some(e) = trained.selected_epoch {
            info!("kept generator from epoch {e}");
        }
        save_checkpoint(&ws.path(EXAMGAN), &trained)?;
        write_loss_csv(&ws.path(EXAMGAN_LOSS), &trained.losses)?;
        Ok(())
    })
}

/// Pretrains one pair of generators and runs each requested strategy from
/// that shared starting point.
pub fn stage_train_twin(cfg: &RunConfig, ws: &Workspace, strategies: &[Strategy]) -> anyhow::Result<()> {
    if strategies.is_empty() {
        return Ok(());
    }
    timed("train-texamgan", || {
        let course = ws.course()?;
        let data = read_training_data(&ws.require(TRAINING_DATA, "seed")?, &course)?;
        let bank = course.questions().len();
        let mut twin_cfg = cfg.twin.clone();
        twin_cfg.n = cfg.seeding.n;
        let seed = derive_seed(cfg.seed, stream::TWIN, 0);
        let base = init_twin(&data, bank, &twin_cfg, strategies[0], seed)?;
        info!("twin generators pretrained, psi = {:.4}", base.psi);
        for &s in strategies {
            let mut model = base.clone();
            model.strategy = s;
            match s {
                Strategy::S1 => run_s1(&mut model, &data, bank, &twin_cfg, seed)?,
                Strategy::S2 => run_s2(&mut model, &data, bank, &twin_cfg, seed)?,
            }
            model.save(&ws.path(&twin_file(s)))?;
        }
        Ok(())
    })
}

fn ids_of(course: &Course) -> impl Fn(&[usize]) -> Vec<u64> + '_ {
    move |qs| qs.iter().map(|&q| course.question(q).id).collect()
}

/// Generates scripts for every test class with each configured method and
/// pairs with each trained twin model, then assesses them all.
pub fn stage_evaluate(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<EvaluationReport> {
    timed("evaluate", || {
        let course = ws.course()?;
        let split = ws.classes()?;
        let masteries = ws.masteries()?;
        let tests = part_inputs(&split.test, &masteries)?;
        let target = target_of(cfg)?;
        let n = cfg.seeding.n;
        let k = cfg.scripts_per_class;
        let first = split.first_test();
        let ids = ids_of(&course);
        let examgan = if cfg.methods.contains(&Method::Examgan) {
            Some(ws.examgan()?)
        } else {
            None
        };
        let mut scripts = Vec::new();
        for &method in &cfg.methods {
            let per_class: Vec<Vec<ScriptEntry>> = tests
                .par_iter()
                .enumerate()
                .map(|(i, (c, m))| {
                    let class = first + i;
                    let generated: Vec<ExamScript> = match method {
                        Method::Examgan => {
                            let g = &examgan.as_ref().expect("loaded above").generator;
                            (0..k)
                                .map(|s| {
                                    let seed = derive_seed(cfg.seed, stream::GENERATE, (class * k + s) as u64);
                                    generate_script(g, c, n, seed)
                                })
                                .collect::<Result<_, _>>()?
                        }
                        Method::Rsf => {
                            let rsf = SeedingConfig {
                                keep_fraction: k as f64 / cfg.seeding.m as f64,
                                ..cfg.seeding.clone()
                            };
                            let seed = derive_seed(cfg.seed, stream::RSF, class as u64);
                            sample_and_filter(m, &course, &rsf, &target, seed)?.adopted_scripts()
                        }
                        Method::Ga => (0..k)
                            .map(|s| {
                                let seed = derive_seed(cfg.seed, stream::GA, (class * k + s) as u64);
                                Ok(ga_generate_from_masteries(m, &course, n, &cfg.ga, seed)?.script)
                            })
                            .collect::<anyhow::Result<_>>()?,
                    };
                    generated
                        .iter()
                        .enumerate()
                        .map(|(s, script)| {
                            let r = assess_script(m, script, &course, &target)?;
                            Ok(ScriptEntry::new(method.name(), class, s, ids(script.questions()), &r))
                        })
                        .collect::<anyhow::Result<Vec<_>>>()
                })
                .collect::<anyhow::Result<_>>()?;
            scripts.extend(per_class.into_iter().flatten());
        }
        let mut pairs = Vec::new();
        for &strategy in &cfg.twin_strategies {
            let model = ws.twin(strategy)?;
            for (i, (c, m)) in tests.iter().enumerate() {
                let class = first + i;
                for s in 0..k {
                    let seed = derive_seed(cfg.seed, stream::PAIR, (class * k + s) as u64);
                    let pair = generate_pair(&model, c, m, &course, n, &target, seed)?;
                    pairs.push(PairEntry::new(strategy, class, s, &pair, &ids));
                }
            }
        }
        let report = EvaluationReport::build(scripts, pairs, cfg.twin.overlap_threshold);
        report.save(&ws.path(EVALUATION))?;
        Ok(report)
    })
}

pub fn stage_export_plots(ws: &Workspace) -> anyhow::Result<Vec<PathBuf>> {
    timed("export-plots", || {
        let report = EvaluationReport::load(&ws.require(EVALUATION, "evaluate")?)?;
        export_plots(&report, &ws.path(PLOTS_DIR))
    })
}

/// Configuration, seed, versions and produced files of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Files in the run directory with their sizes in bytes.
    pub artifacts: BTreeMap<String, u64>,
}

pub fn write_manifest(cfg: &RunConfig, ws: &Workspace, command: &str) -> anyhow::Result<()> {
    let mut artifacts = BTreeMap::new();
    collect_files(&ws.root, &ws.root, &mut artifacts)?;
    artifacts.remove(MANIFEST);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts,
    };
    std::fs::write(ws.path(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, u64>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            out.insert(rel, entry.metadata()?.len());
        }
    }
    Ok(())
}

/// Every stage in order.
pub fn run_pipeline(cfg: &RunConfig, ws: &Workspace) -> anyhow::Result<EvaluationReport> {
    cfg.validate()?;
    stage_data(cfg, ws)?;
    stage_train_dkt(cfg, ws)?;
    stage_seed(cfg, ws)?;
    if cfg.methods.contains(&Method::Examgan) {
        stage_train_examgan(cfg, ws)?;
    }
    stage_train_twin(cfg, ws, &cfg.twin_strategies)?;
    let report = stage_evaluate(cfg, ws)?;
    stage_export_plots(ws)?;
    write_manifest(cfg, ws, "pipeline")?;
    Ok(report)
}
