//! Conditional exam-script generation: knowledge tracing, script quality
//! metrics, training-data seeding, the conditional and twin adversarial
//! generators, and a genetic-algorithm baseline.

pub mod assess;
pub mod baselines;
pub mod data;
pub mod dkt;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod neural;
pub mod seeding;
pub mod twin;

pub use assess::{assess_script, ExamScript, QualityBand, QualityReport, TargetDistribution};
pub use data::{Course, ExerciseRecord, Question, StudentHistories, StudentId};
pub use dkt::{DktConfig, DktModel};
pub use error::{Error, Result};
pub use gan::{generate_script, GanConfig, TrainedGan};
pub use seeding::{Condition, SeedingConfig, TrainingInstance};
pub use twin::{ScriptPair, Strategy, TwinConfig, TwinModel};
