use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use scriptgen_cli::stages::{self, Workspace};
use scriptgen_cli::RunConfig;
use scriptgen_core::assess::{solve_sigma, verify_sigma_montecarlo};
use scriptgen_core::gan::generate_script;
use scriptgen_core::seeding::condition_from_masteries;
use scriptgen_core::twin::{generate_pair, Strategy};

#[derive(Parser)]
#[command(name = "scriptgen", version, about = "Generate exam scripts conditioned on a class's knowledge mastery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    S1,
    S2,
    Both,
}

impl StrategyArg {
    fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyArg::S1 => vec![Strategy::S1],
            StrategyArg::S2 => vec![Strategy::S2],
            StrategyArg::Both => vec![Strategy::S1, Strategy::S2],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from data to plots.
    Pipeline(Common),
    /// Validate and import a question bank, exercise bank and records.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        exercises: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Write a synthetic course and exercise records.
    Synth(Common),
    /// Train the knowledge tracer and store per-student mastery.
    TrainDkt(Common),
    /// Form classes and build training scripts by sampling and filtering.
    Seed(Common),
    /// Train the conditional GAN.
    TrainExamgan(Common),
    /// Train twin generators.
    TrainTexamgan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        strategy: StrategyArg,
    },
    /// Print generated scripts for one class as JSON lines.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Class index in the class list.
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Print generated script pairs for one class as JSON lines.
    GeneratePair {
        #[command(flatten)]
        common: Common,
        /// Class index in the class list.
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value = "s2")]
        strategy: StrategyArg,
    },
    /// Generate and assess scripts for the test classes.
    Evaluate(Common),
    /// Write chart data from the evaluation report.
    ExportPlots(Common),
    /// Solve for the target standard deviation giving a distinguishability.
    SolveSigma {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 70.0)]
        mu: f64,
        #[arg(long, default_value_t = 0.39)]
        target: f64,
        /// Monte-Carlo samples for the check at the solved sigma.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

impl Common {
    fn load(&self) -> anyhow::Result<(RunConfig, Workspace)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok((cfg, Workspace::create(&self.out)?))
    }
}

fn class_inputs(ws: &Workspace, class: usize) -> anyhow::Result<Vec<Vec<f64>>> {
    let split = ws.classes()?;
    let all: Vec<_> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
    let ids = all
        .get(class)
        .with_context(|| format!("class {class} out of range (have {})", all.len()))?;
    stages::class_masteries(ids, &ws.masteries()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pipeline(c) => {
            let (cfg, ws) = c.load()?;
            let report = stages::run_pipeline(&cfg, &ws)?;
            for (method, s) in &report.summaries {
                println!(
                    "{method:>16}  n={:<4} difficulty {:.3}  distinguishability {:.3}  validity {:.3}  rationality {:.4}  qualified {:.0}%",
                    s.count,
                    s.mean_difficulty,
                    s.mean_distinguishability,
                    s.mean_validity,
                    s.mean_rationality,
                    100.0 * s.qualified_share
                );
            }
            for (name, s) in &report.pair_summaries {
                println!(
                    "{name:>16}  pairs={:<4} median overlap {:.3}  within threshold {:.0}%  median gaps: difficulty {:.4} rationality {:.4}",
                    s.count,
                    s.median_overlap,
                    100.0 * s.overlap_ok_share,
                    s.median_difficulty_gap,
                    s.median_rationality_gap
                );
            }
        }
        Command::Ingest {
            common,
            questions,
            exercises,
            records,
        } => {
            let (mut cfg, ws) = common.load()?;
            cfg.input.question_bank = questions.or(cfg.input.question_bank);
            cfg.input.exercise_bank = exercises.or(cfg.input.exercise_bank);
            cfg.input.records = records.or(cfg.input.records);
            stages::stage_ingest(&cfg, &ws)?;
            stages::write_manifest(&cfg, &ws, "ingest")?;
        }
        Command::Synth(c) => {
            let (cfg, ws) = c.load()?;
            stages::stage_synth(&cfg, &ws)?;
            stages::write_manifest(&cfg, &ws, "synth")?;
        }
        Command::TrainDkt(c) => {
            let (cfg, ws) = c.load()?;
            stages::stage_train_dkt(&cfg, &ws)?;
            stages::write_manifest(&cfg, &ws, "train-dkt")?;
        }
        Command::Seed(c) => {
            let (cfg, ws) = c.load()?;
            stages::stage_seed(&cfg, &ws)?;
            stages::write_manifest(&cfg, &ws, "seed")?;
        }
        Command::TrainExamgan(c) => {
            let (cfg, ws) = c.load()?;
            stages::stage_train_examgan(&cfg, &ws)?;
            stages::write_manifest(&cfg, &ws, "train-examgan")?;
        }
        Command::TrainTexamgan { common, strategy } => {
            let (cfg, ws) = common.load()?;
            stages::stage_train_twin(&cfg, &ws, &strategy.strategies())?;
            stages::write_manifest(&cfg, &ws, "train-texamgan")?;
        }
        Command::Generate { common, class, count } => {
            let (cfg, ws) = common.load()?;
            let course = ws.course()?;
            let m = class_inputs(&ws, class)?;
            let c = condition_from_masteries(&m)?;
            let gan = ws.examgan()?;
            let target = stages::target_of(&cfg)?;
            for s in 0..count {
                let script = generate_script(&gan.generator, &c, cfg.seeding.n, cfg.seed.wrapping_add(s as u64))?;
                let report = scriptgen_core::assess::assess_script(&m, &script, &course, &target)?;
                let line = serde_json::json!({
                    "class": class,
                    "sample": s,
                    "questions": script.question_ids(&course),
                    "report": {
                        "difficulty": report.difficulty,
                        "distinguishability": report.distinguishability,
                        "validity": report.validity,
                        "rationality": report.rationality,
                        "band": report.band,
                    },
                });
                println!("{line}");
            }
        }
        Command::GeneratePair {
            common,
            class,
            count,
            strategy,
        } => {
            let (cfg, ws) = common.load()?;
            let course = ws.course()?;
            let m = class_inputs(&ws, class)?;
            let c = condition_from_masteries(&m)?;
            let target = stages::target_of(&cfg)?;
            for st in strategy.strategies() {
                let model = ws.twin(st)?;
                for s in 0..count {
                    let pair = generate_pair(&model, &c, &m, &course, cfg.seeding.n, &target, cfg.seed.wrapping_add(s as u64))?;
                    let line = serde_json::json!({
                        "class": class,
                        "sample": s,
                        "strategy": st,
                        "questions_a": pair.e_a.question_ids(&course),
                        "questions_b": pair.e_b.question_ids(&course),
                        "jaccard_distance": pair.jaccard_distance,
                        "overlap": pair.overlap,
                        "rationality_a": pair.report_a.rationality,
                        "rationality_b": pair.report_b.rationality,
                        "difficulty_a": pair.report_a.difficulty,
                        "difficulty_b": pair.report_b.difficulty,
                    });
                    println!("{line}");
                }
            }
        }
        Command::Evaluate(c) => {
            let (cfg, ws) = c.load()?;
            stages::stage_evaluate(&cfg, &ws)?;
            stages::write_manifest(&cfg, &ws, "evaluate")?;
        }
        Command::ExportPlots(c) => {
            let (cfg, ws) = c.load()?;
            for p in stages::stage_export_plots(&ws)? {
                println!("{}", p.display());
            }
            stages::write_manifest(&cfg, &ws, "export-plots")?;
        }
        Command::SolveSigma {
            common,
            mu,
            target,
            samples,
        } => {
            let (cfg, _) = common.load()?;
            let sol = solve_sigma(mu, target)?;
            let check = verify_sigma_montecarlo(mu, 15.0, samples, cfg.seed)?;
            let check_exact = verify_sigma_montecarlo(mu, sol.sigma_exact, samples, cfg.seed)?;
            println!("mu {mu}  target distinguishability {target}");
            println!("sigma from the lower-tail bound:   {:.4}", sol.sigma_lower_bound);
            println!("sigma from exact 27% group means:  {:.4}", sol.sigma_exact);
            println!("reference sigma:                   15");
            println!("Monte-Carlo distinguishability at sigma 15:      {check:.4}");
            println!("Monte-Carlo distinguishability at exact sigma:   {check_exact:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
