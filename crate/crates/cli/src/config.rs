use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use scriptgen_core::baselines::GaConfig;
use scriptgen_core::data::SynthConfig;
use scriptgen_core::dkt::DktConfig;
use scriptgen_core::gan::GanConfig;
use scriptgen_core::seeding::SeedingConfig;
use scriptgen_core::twin::{Strategy, TwinConfig};

/// Where course and records come from. Missing paths mean a synthetic cohort.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub question_bank: Option<PathBuf>,
    pub exercise_bank: Option<PathBuf>,
    pub records: Option<PathBuf>,
}

impl InputPaths {
    pub fn is_synthetic(&self) -> bool {
        self.question_bank.is_none() && self.exercise_bank.is_none() && self.records.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Examgan,
    Rsf,
    Ga,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Examgan => "examgan",
            Method::Rsf => "rsf",
            Method::Ga => "ga",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub input: InputPaths,
    pub synth: SynthConfig,
    pub class_size: usize,
    pub class_count: usize,
    /// Train, validation and test shares of the classes.
    pub split: [f64; 3],
    pub target_mu: f64,
    pub target_sigma: f64,
    pub seeding: SeedingConfig,
    pub dkt: DktConfig,
    pub gan: GanConfig,
    /// Validation check interval in epochs; 0 keeps the last generator.
    pub validation_every: usize,
    pub twin: TwinConfig,
    /// Twin strategies trained by the pipeline; empty skips the twin stage.
    pub twin_strategies: Vec<Strategy>,
    pub ga: GaConfig,
    pub methods: Vec<Method>,
    /// Scripts (or pairs) generated per test class and method.
    pub scripts_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: InputPaths::default(),
            synth: SynthConfig::default(),
            class_size: 50,
            class_count: 100,
            split: [0.8, 0.1, 0.1],
            target_mu: 70.0,
            target_sigma: 15.0,
            seeding: SeedingConfig::default(),
            dkt: DktConfig::default(),
            gan: GanConfig {
                epochs: 300,
                ..GanConfig::default()
            },
            validation_every: 25,
            twin: TwinConfig {
                pretrain_epochs: 300,
                ..TwinConfig::default()
            },
            twin_strategies: vec![Strategy::S1, Strategy::S2],
            ga: GaConfig::default(),
            methods: vec![Method::Examgan, Method::Rsf, Method::Ga],
            scripts_per_class: 10,
        }
    }
}

impl RunConfig {
    /// Reads a TOML config, or the config embedded in a run manifest when the
    /// file ends in `.json`.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let manifest: crate::stages::Manifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing manifest {}", path.display()))?;
            manifest.config
        } else {
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.split.iter().any(|&s| s < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("class split {:?} must be non-negative and sum to 1", self.split);
        }
        if self.class_size == 0 || self.class_count == 0 || self.scripts_per_class == 0 {
            bail!("class size, class count and scripts per class must be positive");
        }
        let (train, val, test) = self.split_counts();
        if train == 0 || test == 0 {
            bail!("split leaves {train} training and {test} test classes");
        }
        if self.validation_every > 0 && val == 0 {
            bail!("validation checks need at least one validation class");
        }
        if self.seeding.n == 0 {
            bail!("script size must be positive");
        }
        self.gan.validate()?;
        self.twin.validate()?;
        self.ga.validate()?;
        Ok(())
    }

    /// Class counts of the train, validation and test parts. Rounding
    /// leftovers go to the training part.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let val = (self.split[1] * self.class_count as f64).round() as usize;
        let test = (self.split[2] * self.class_count as f64).round() as usize;
        let train = self.class_count.saturating_sub(val + test);
        (train, val, test)
    }

    /// A configuration small enough for smoke tests.
    pub fn tiny() -> Self {
        let mut c = RunConfig {
            synth: SynthConfig {
                kp_count: 6,
                qub_size: 60,
                exb_size: 20,
                student_count: 40,
                records_per_student: 15,
                ..SynthConfig::default()
            },
            class_size: 10,
            class_count: 10,
            seeding: SeedingConfig {
                n: 8,
                m: 100,
                keep_fraction: 0.02,
            },
            dkt: DktConfig {
                hidden_size: 8,
                epochs: 2,
                ..DktConfig::default()
            },
            gan: GanConfig {
                epochs: 4,
                generator_hidden: 16,
                discriminator_hidden: 8,
                noise_dim: 4,
                ..GanConfig::default()
            },
            validation_every: 2,
            ga: GaConfig {
                population: 20,
                generations: 3,
                ..GaConfig::default()
            },
            scripts_per_class: 2,
            ..RunConfig::default()
        };
        c.twin = TwinConfig {
            gan: c.gan.clone(),
            pretrain_epochs: 3,
            gamma: 2,
            n: c.seeding.n,
            difference_step_cap: 3,
            ..TwinConfig::default()
        };
        c
    }
}
