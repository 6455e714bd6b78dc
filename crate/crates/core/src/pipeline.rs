//! End-to-end experiments on the synthetic shifted benchmark: data
//! preparation, source training, adaptation, evaluation and grid sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{generate_domain_pair, stratified_split, Dataset, DomainShiftSpec};
use crate::eval::{evaluate, Metrics};
use crate::model::Model;
use crate::splitter::{split_diagnostics, SplitDiagnostics};
use crate::trainer::{adapt, train_source, AdaptOutcome, Mode, RunRecord, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

/// Every split of one benchmark instance. Target training labels are kept
/// apart from the (unlabeled) target training features.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkData {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_train_truth: Vec<usize>,
    pub target_test: Dataset,
}

/// Generates the domain pair and applies the per-class train/test split to
/// both domains, then holds out `val_fraction` of the source training split.
pub fn prepare_benchmark(spec: &DomainShiftSpec, split_ratio: f64, val_fraction: f64) -> Result<BenchmarkData> {
    let (source, target) = generate_domain_pair(spec)?;
    let split_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let (source_train_full, source_test) = stratified_split(&source, split_ratio, split_seed)?;
    let (target_train, target_test) = stratified_split(&target, split_ratio, split_seed ^ 1)?;
    let (source_train, source_val) =
        stratified_split(&source_train_full, 1.0 - val_fraction, split_seed ^ 2)?;
    let truth = target_train
        .require_labels("benchmark preparation")?
        .to_vec();
    Ok(BenchmarkData {
        source_train: source_train.with_tag("source_train"),
        source_val: source_val.with_tag("source_val"),
        source_test: source_test.with_tag("source_test"),
        target_train: target_train.without_labels().with_tag("target_train"),
        target_train_truth: truth,
        target_test: target_test.with_tag("target_test"),
    })
}

/// Outcome of adapting one source model and scoring it.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub outcome: AdaptOutcome,
    pub metrics: Metrics,
}

/// Adapts, fills in split diagnostics against the held-apart ground truth
/// and evaluates on the target test set.
pub fn run_adaptation(
    source_model: &Model,
    target_train: &Dataset,
    target_train_truth: Option<&[usize]>,
    target_test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(AdaptOutcome, Option<Metrics>)> {
    let mut outcome = adapt(source_model, target_train, config)?;
    if let Some(split) = &outcome.split {
        outcome.record.split = Some(split_diagnostics(split, target_train_truth));
    }
    let metrics = target_test.map(|t| evaluate(&outcome.model, t)).transpose()?;
    outcome.record.test_metrics = metrics.clone();
    Ok((outcome, metrics))
}

pub fn run_experiment(data: &BenchmarkData, source_model: &Model, config: &TrainConfig) -> Result<Experiment> {
    let (outcome, metrics) = run_adaptation(
        source_model,
        &data.target_train,
        Some(&data.target_train_truth),
        Some(&data.target_test),
        config,
    )?;
    Ok(Experiment {
        outcome,
        metrics: metrics.expect("test set supplied"),
    })
}

/// Source model trained on the benchmark's source splits with `config.seed`.
pub fn train_benchmark_source(data: &BenchmarkData, config: &TrainConfig) -> Result<Model> {
    train_source(&data.source_train, &data.source_val, config)
}

/// Run summary written next to every run; deliberately free of timing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub config: TrainConfig,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub split: Option<SplitDiagnostics>,
    pub final_losses: Option<crate::losses::LossReport>,
    pub test_metrics: Option<Metrics>,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        Self {
            mode: r.mode,
            seed: r.seed,
            config: r.config.clone(),
            labeled_count: r.labeled_count,
            unlabeled_count: r.unlabeled_count,
            split: r.split,
            final_losses: r.epochs.last().map(|e| e.losses),
            test_metrics: r.test_metrics.clone(),
        }
    }
}

/// Grid description for [`sweep`].
///
/// ```toml
/// seeds = [0, 1, 2]
/// [grid]
/// p_th = [0.8, 0.9]
/// [base]          # optional config overrides
/// adapt_epochs = 10
/// [benchmark]     # optional DomainShiftSpec fields (seed is set per run)
/// samples_per_class = 200
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default)]
    pub base: toml::Table,
    #[serde(default)]
    pub benchmark: Option<DomainShiftSpec>,
    #[serde(default)]
    pub split_ratio: Option<f64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl SweepGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(format!("grid file: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.values().any(Vec::is_empty) {
            return Err(Error::Config("grid must name at least one parameter with at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        Ok(())
    }

    /// Cartesian product of the grid, parameters in name order.
    pub fn cells(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut cells: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn base_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.base {
            cfg.set(k, &v.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Vec<(String, String)>,
    pub seed: u64,
    pub ratio: Option<f64>,
    pub pl_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub error: Option<String>,
    pub record: Option<RunRecord>,
}

type Cell = Vec<(String, toml::Value)>;

/// One adaptation run per (cell, seed). Source models are trained once per
/// seed and shared by all cells. Failed cells are recorded and skipped.
pub fn sweep(grid: &SweepGrid, benchmark: &DomainShiftSpec, jobs: usize) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    let base = grid.base_config()?;
    let ratio = grid.split_ratio.unwrap_or(DEFAULT_SPLIT_RATIO);
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    pool.install(|| {
        let per_seed: Vec<Result<(u64, BenchmarkData, Model)>> = grid
            .seeds
            .par_iter()
            .map(|&seed| {
                let spec = DomainShiftSpec {
                    seed,
                    ..benchmark.clone()
                };
                let data = prepare_benchmark(&spec, ratio, base.source_val_fraction)?;
                let cfg = TrainConfig { seed, ..base.clone() };
                let model = train_benchmark_source(&data, &cfg)?;
                Ok((seed, data, model))
            })
            .collect();
        let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;

        let jobs: Vec<(&Cell, &(u64, BenchmarkData, Model))> = cells
            .iter()
            .flat_map(|cell| per_seed.iter().map(move |s| (cell, s)))
            .collect();
        Ok(jobs
            .par_iter()
            .map(|(cell, (seed, data, source))| {
                let params: Vec<(String, String)> =
                    cell.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
                let run = || -> Result<Experiment> {
                    let mut cfg = TrainConfig {
                        seed: *seed,
                        ..base.clone()
                    };
                    for (k, v) in cell.iter() {
                        cfg.set(k, &v.to_string())?;
                    }
                    run_experiment(data, source, &cfg)
                };
                match run() {
                    Ok(exp) => {
                        let split = exp.outcome.record.split;
                        SweepRow {
                            params,
                            seed: *seed,
                            ratio: split.map(|s| s.ratio),
                            pl_accuracy: split.and_then(|s| s.pl_accuracy),
                            test_accuracy: Some(exp.metrics.micro_accuracy),
                            error: None,
                            record: Some(exp.outcome.record),
                        }
                    }
                    Err(e) => {
                        log::warn!("sweep cell {params:?} seed {seed} failed: {e}");
                        SweepRow {
                            params,
                            seed: *seed,
                            ratio: None,
                            pl_accuracy: None,
                            test_accuracy: None,
                            error: Some(e.to_string()),
                            record: None,
                        }
                    }
                }
            })
            .collect())
    })
}

/// Sweep rows as CSV: parameter columns, then ratio, pl_acc, test_acc, seed, error.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut out: Vec<String> = first.params.iter().map(|(k, _)| k.clone()).collect();
    out.extend(["ratio", "pl_acc", "test_acc", "seed", "error"].map(String::from));
    let mut text = out.join(",") + "\n";
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        let mut fields: Vec<String> = r.params.iter().map(|(_, v)| v.clone()).collect();
        fields.push(opt(r.ratio));
        fields.push(opt(r.pl_accuracy));
        fields.push(opt(r.test_accuracy));
        fields.push(r.seed.to_string());
        fields.push(r.error.clone().unwrap_or_default().replace(',', ";"));
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    text
}

/// Mean of each metric per cell across seeds (failed runs excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub params: Vec<(String, String)>,
    pub runs: usize,
    pub ratio: Option<f64>,
    pub pl_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub fn summarize_cells(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut order: Vec<Vec<(String, String)>> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let key = format!("{:?}", r.params);
        if !groups.contains_key(&key) {
            order.push(r.params.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|params| {
            let rs = &groups[&format!("{params:?}")];
            let mean = |f: &dyn Fn(&SweepRow) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            CellSummary {
                runs: rs.iter().filter(|r| r.error.is_none()).count(),
                ratio: mean(&|r| r.ratio),
                pl_accuracy: mean(&|r| r.pl_accuracy),
                test_accuracy: mean(&|r| r.test_accuracy),
                params,
            }
        })
        .collect()
}

/// Parses `key=value` pairs into a config, starting from `base`.
pub fn apply_overrides(base: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}
