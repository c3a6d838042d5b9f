use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use scriptgen_core::assess::{QualityBand, QualityReport};
use scriptgen_core::twin::{ScriptPair, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub method: String,
    /// Index of the class in the full class list.
    pub class: usize,
    pub sample: usize,
    pub questions: Vec<u64>,
    pub difficulty: f64,
    pub distinguishability: f64,
    pub validity: f64,
    pub rationality: f64,
    pub band: QualityBand,
}

impl ScriptEntry {
    pub fn new(method: &str, class: usize, sample: usize, questions: Vec<u64>, r: &QualityReport) -> Self {
        Self {
            method: method.to_string(),
            class,
            sample,
            questions,
            difficulty: r.difficulty,
            distinguishability: r.distinguishability,
            validity: r.validity,
            rationality: r.rationality,
            band: r.band,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub strategy: Strategy,
    pub class: usize,
    pub sample: usize,
    pub jaccard_distance: f64,
    pub overlap: f64,
    pub a: ScriptEntry,
    pub b: ScriptEntry,
}

impl PairEntry {
    pub fn new(strategy: Strategy, class: usize, sample: usize, pair: &ScriptPair, ids: impl Fn(&[usize]) -> Vec<u64>) -> Self {
        let label = format!("texamgan-{strategy:?}").to_lowercase();
        Self {
            strategy,
            class,
            sample,
            jaccard_distance: pair.jaccard_distance,
            overlap: pair.overlap,
            a: ScriptEntry::new(&label, class, sample, ids(pair.e_a.questions()), &pair.report_a),
            b: ScriptEntry::new(&label, class, sample, ids(pair.e_b.questions()), &pair.report_b),
        }
    }

    pub fn difficulty_gap(&self) -> f64 {
        (self.a.difficulty - self.b.difficulty).abs()
    }

    pub fn rationality_gap(&self) -> f64 {
        (self.a.rationality - self.b.rationality).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub count: usize,
    pub mean_difficulty: f64,
    pub mean_distinguishability: f64,
    pub mean_validity: f64,
    pub mean_rationality: f64,
    /// Share of scripts graded Qualified or better.
    pub qualified_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub count: usize,
    pub median_overlap: f64,
    /// Share of pairs whose shared-question ratio is within the threshold.
    pub overlap_ok_share: f64,
    pub median_difficulty_gap: f64,
    pub median_rationality_gap: f64,
    pub median_jaccard_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scripts: Vec<ScriptEntry>,
    pub pairs: Vec<PairEntry>,
    pub summaries: BTreeMap<String, MethodSummary>,
    pub pair_summaries: BTreeMap<String, PairSummary>,
    /// Per method, each metric's values in ascending order.
    pub series: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

pub const METRICS: [&str; 4] = ["difficulty", "distinguishability", "validity", "rationality"];

fn metric(e: &ScriptEntry, name: &str) -> f64 {
    match name {
        "difficulty" => e.difficulty,
        "distinguishability" => e.distinguishability,
        "validity" => e.validity,
        _ => e.rationality,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

impl EvaluationReport {
    /// Fills summaries and sorted series from the raw entries.
    pub fn build(scripts: Vec<ScriptEntry>, pairs: Vec<PairEntry>, overlap_threshold: f64) -> Self {
        let mut by_method: BTreeMap<String, Vec<&ScriptEntry>> = BTreeMap::new();
        for s in &scripts {
            by_method.entry(s.method.clone()).or_default().push(s);
        }
        let mut summaries = BTreeMap::new();
        let mut series = BTreeMap::new();
        for (method, entries) in &by_method {
            let col = |name: &str| entries.iter().map(|e| metric(e, name)).collect::<Vec<_>>();
            let qualified = entries.iter().filter(|e| e.band >= QualityBand::Qualified).count();
            summaries.insert(
                method.clone(),
                MethodSummary {
                    count: entries.len(),
                    mean_difficulty: mean(&col("difficulty")),
                    mean_distinguishability: mean(&col("distinguishability")),
                    mean_validity: mean(&col("validity")),
                    mean_rationality: mean(&col("rationality")),
                    qualified_share: qualified as f64 / entries.len() as f64,
                },
            );
            let mut per_metric = BTreeMap::new();
            for name in METRICS {
                let mut v = col(name);
                v.sort_by(f64::total_cmp);
                per_metric.insert(name.to_string(), v);
            }
            series.insert(method.clone(), per_metric);
        }
        let mut by_strategy: BTreeMap<String, Vec<&PairEntry>> = BTreeMap::new();
        for p in &pairs {
            by_strategy.entry(p.a.method.clone()).or_default().push(p);
        }
        let pair_summaries = by_strategy
            .into_iter()
            .map(|(name, ps)| {
                let overlaps: Vec<f64> = ps.iter().map(|p| p.overlap).collect();
                let ok = overlaps.iter().filter(|&&o| o <= overlap_threshold).count();
                let summary = PairSummary {
                    count: ps.len(),
                    median_overlap: median(&overlaps),
                    overlap_ok_share: ok as f64 / ps.len() as f64,
                    median_difficulty_gap: median(&ps.iter().map(|p| p.difficulty_gap()).collect::<Vec<_>>()),
                    median_rationality_gap: median(&ps.iter().map(|p| p.rationality_gap()).collect::<Vec<_>>()),
                    median_jaccard_distance: median(&ps.iter().map(|p| p.jaccard_distance).collect::<Vec<_>>()),
                };
                (name, summary)
            })
            .collect();
        Self {
            scripts,
            pairs,
            summaries,
            pair_summaries,
            series,
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const SERIES_CSV: &str = "sorted_series.csv";
pub const SCATTER_CSV: &str = "metric_scatter.csv";
pub const PAIRS_CSV: &str = "pair_overlap.csv";

/// Writes the CSVs behind the comparison charts into `dir` and returns
/// their paths.
pub fn export_plots(report: &EvaluationReport, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;

    let series = dir.join(SERIES_CSV);
    let mut w = csv::Writer::from_path(&series)?;
    w.write_record(["method", "metric", "rank", "value"])?;
    for (method, metrics) in &report.series {
        for (name, values) in metrics {
            for (rank, v) in values.iter().enumerate() {
                w.write_record([method.as_str(), name.as_str(), &rank.to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush()?;

    let scatter = dir.join(SCATTER_CSV);
    let mut w = csv::Writer::from_path(&scatter)?;
    w.write_record([
        "method",
        "class",
        "sample",
        "difficulty",
        "distinguishability",
        "validity",
        "rationality",
        "band",
    ])?;
    for s in &report.scripts {
        w.write_record([
            s.method.clone(),
            s.class.to_string(),
            s.sample.to_string(),
            s.difficulty.to_string(),
            s.distinguishability.to_string(),
            s.validity.to_string(),
            s.rationality.to_string(),
            s.band.to_string(),
        ])?;
    }
    w.flush()?;

    let pairs = dir.join(PAIRS_CSV);
    let mut w = csv::Writer::from_path(&pairs)?;
    w.write_record([
        "strategy",
        "class",
        "sample",
        "jaccard_distance",
        "overlap",
        "difficulty_gap",
        "rationality_gap",
    ])?;
    for p in &report.pairs {
        w.write_record([
            format!("{:?}", p.strategy),
            p.class.to_string(),
            p.sample.to_string(),
            p.jaccard_distance.to_string(),
            p.overlap.to_string(),
            p.difficulty_gap().to_string(),
            p.rationality_gap().to_string(),
        ])?;
    }
    w.flush()?;

    Ok(vec![series, scatter, pairs])
}
