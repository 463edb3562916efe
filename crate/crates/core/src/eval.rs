//! Metrics, the leave-one-domain-out harness and training diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::episodes::MixRatioSchedule;
use crate::error::{Error, Result};
use crate::metatrain::{train, train_deepall, EpisodeLog, TrainConfig, TrainOutcome};
use crate::model::{embed, predict, Backbone, ModelParams};

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Dice overlap `2|P∩G| / (|P| + |G|)` of two flattened binary masks; two
/// empty masks score 1.
pub fn dice(prediction: &[bool], truth: &[bool]) -> Result<f64> {
    if prediction.len() != truth.len() {
        return Err(Error::Shape(format!(
            "mask sizes {} and {}",
            prediction.len(),
            truth.len()
        )));
    }
    let p = prediction.iter().filter(|&&x| x).count();
    let g = truth.iter().filter(|&&x| x).count();
    if p + g == 0 {
        return Ok(1.0);
    }
    let both = prediction
        .iter()
        .zip(truth)
        .filter(|(a, b)| **a && **b)
        .count();
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn dataset_accuracy(params: &ModelParams, dataset: &DomainDataset) -> Result<f64> {
    let batch = dataset.to_batch();
    accuracy(&predict(params, &batch.inputs)?, &batch.labels)
}

/// Trailing moving average (window 1 is the identity).
fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Trapezoidal area between the meta-test and unseen-domain task-loss
/// curves over iterations `burn_in..`, optionally smoothing both curves
/// first.
pub fn overfit_gap_area(logs: &[EpisodeLog], burn_in: usize, window: Option<usize>) -> Result<f64> {
    if burn_in >= logs.len() {
        return Err(Error::InvalidArgument(format!(
            "burn_in {burn_in} leaves nothing of {} iterations",
            logs.len()
        )));
    }
    let mut xs = Vec::with_capacity(logs.len());
    let mut seen = Vec::with_capacity(logs.len());
    let mut unseen = Vec::with_capacity(logs.len());
    for l in logs {
        let (Some(a), Some(b)) = (l.loss_task_metatest, l.loss_task_unseen) else {
            return Err(Error::InvalidArgument(format!(
                "iteration {} lacks the meta-test or unseen-domain loss",
                l.iteration
            )));
        };
        xs.push(l.iteration as f64);
        seen.push(a);
        unseen.push(b);
    }
    let w = window.unwrap_or(1);
    let (seen, unseen) = (smooth(&seen, w), smooth(&unseen, w));
    let gap: Vec<f64> = seen
        .iter()
        .zip(&unseen)
        .map(|(a, b)| (b - a).abs())
        .collect();
    let area = (burn_in + 1..logs.len())
        .map(|i| 0.5 * (gap[i] + gap[i - 1]) * (xs[i] - xs[i - 1]))
        .sum();
    Ok(area)
}

/// Writes `z0..z{d−1},label,domain_id` rows for every sample of every domain.
pub fn export_embeddings(
    params: &ModelParams,
    domains: &[DomainDataset],
    path: &Path,
) -> Result<usize> {
    let d_z = params.backbone.d_z();
    let mut out = String::new();
    for i in 0..d_z {
        let _ = write!(out, "z{i},");
    }
    out.push_str("label,domain_id\n");
    let mut rows = 0;
    for d in domains {
        let batch = d.to_batch();
        let z = embed(params, &batch.inputs)?;
        for (r, (label, dom)) in batch.labels.iter().zip(&batch.domain_ids).enumerate() {
            for v in z.row(r) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{label},{dom}");
            rows += 1;
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Episodic meta-training.
    Episodic,
    /// Pooled supervised baseline.
    DeepAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
    pub train: TrainConfig,
    pub schedule: MixRatioSchedule,
}

impl MethodSpec {
    pub fn run(
        &self,
        sources: &[DomainDataset],
        initial: &ModelParams,
        diagnostics: Option<&DomainDataset>,
    ) -> Result<TrainOutcome> {
        match self.kind {
            MethodKind::Episodic => {
                train(sources, &self.train, &self.schedule, initial, diagnostics)
            }
            MethodKind::DeepAll => train_deepall(sources, &self.train, initial, diagnostics),
        }
    }
}

/// A domain with its train/test halves.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDomain {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

impl SplitDomain {
    pub fn name(&self) -> &str {
        &self.train.name
    }
}

/// Training splits of every domain except `held_out`.
pub fn lodo_sources(domains: &[SplitDomain], held_out: usize) -> Vec<DomainDataset> {
    domains
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != held_out)
        .map(|(_, d)| d.train.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub held_out: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
    pub config_hash: String,
}

/// Outcome of one (held-out domain, method, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub held_out: usize,
    pub method: usize,
    pub seed: u64,
    pub heldout_acc: f64,
    pub source_acc: f64,
    /// Domain ids of the datasets the cell trained on.
    pub trained_on: Vec<usize>,
    pub logs: Vec<EpisodeLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodoReport {
    pub results: Vec<RunResult>,
    pub cells: Vec<CellResult>,
}

pub const AVERAGE_ROW: &str = "Average";
pub const METRIC_HELDOUT: &str = "acc";
pub const METRIC_SOURCE: &str = "acc_source";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Options of a leave-one-domain-out grid.
#[derive(Clone, Debug)]
pub struct LodoOptions {
    pub backbone: Backbone,
    pub seeds: Vec<u64>,
    /// Worker threads for the grid; 0 lets the pool decide.
    pub jobs: usize,
    pub config_hash: String,
}

/// Runs every (held-out domain, method, seed) cell, then aggregates
/// mean ± sample std over seeds, plus an `Average` row per method.
pub fn leave_one_domain_out(
    domains: &[SplitDomain],
    methods: &[MethodSpec],
    options: &LodoOptions,
) -> Result<LodoReport> {
    if domains.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-domain-out needs at least 3 domains, got {}",
            domains.len()
        )));
    }
    if options.seeds.is_empty() || methods.is_empty() {
        return Err(Error::InvalidArgument("no seeds or no methods".into()));
    }
    let num_classes = domains[0].train.num_classes;
    let grid: Vec<(usize, usize, u64)> = (0..domains.len())
        .flat_map(|h| {
            (0..methods.len()).flat_map(move |m| options.seeds.iter().map(move |&s| (h, m, s)))
        })
        .collect();

    let run_cell = |&(h, m, seed): &(usize, usize, u64)| -> Result<CellResult> {
        let sources = lodo_sources(domains, h);
        let method = &methods[m];
        let mut spec = method.clone();
        spec.train.seed = seed;
        let initial = ModelParams::init(options.backbone, num_classes, seed)?;
        let out = spec.run(&sources, &initial, None)?;
        let heldout_acc = dataset_accuracy(&out.params, &domains[h].test)?;
        let source_accs = domains
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != h)
            .map(|(_, d)| dataset_accuracy(&out.params, &d.test))
            .collect::<Result<Vec<_>>>()?;
        Ok(CellResult {
            held_out: h,
            method: m,
            seed,
            heldout_acc,
            source_acc: source_accs.iter().sum::<f64>() / source_accs.len() as f64,
            trained_on: sources.iter().map(|d| d.domain_id).collect(),
            logs: out.logs,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let cells: Vec<CellResult> =
        pool.install(|| grid.par_iter().map(run_cell).collect::<Result<Vec<_>>>())?;

    let mut results = Vec::new();
    for (m, method) in methods.iter().enumerate() {
        for (metric, pick) in [
            (
                METRIC_HELDOUT,
                (|c: &CellResult| c.heldout_acc) as fn(&CellResult) -> f64,
            ),
            (METRIC_SOURCE, |c: &CellResult| c.source_acc),
        ] {
            let mut by_seed_avg = vec![0.0; options.seeds.len()];
            for (h, d) in domains.iter().enumerate() {
                let per_seed: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.held_out == h && c.method == m)
                    .map(pick)
                    .collect();
                for (acc, v) in by_seed_avg.iter_mut().zip(&per_seed) {
                    *acc += v / domains.len() as f64;
                }
                let (mean, std) = mean_std(&per_seed);
                results.push(RunResult {
                    held_out: d.name().to_string(),
                    method: method.name.clone(),
                    metric: metric.to_string(),
                    mean,
                    std,
                    per_seed,
                    config_hash: options.config_hash.clone(),
                });
            }
            let setting_means: Vec<f64> = results
                .iter()
                .filter(|r| r.method == method.name && r.metric == metric)
                .map(|r| r.mean)
                .collect();
            let mean = setting_means.iter().sum::<f64>() / setting_means.len() as f64;
            let (_, std) = mean_std(&by_seed_avg);
            results.push(RunResult {
                held_out: AVERAGE_ROW.to_string(),
                method: method.name.clone(),
                metric: metric.to_string(),
                mean,
                std,
                per_seed: by_seed_avg,
                config_hash: options.config_hash.clone(),
            });
        }
    }
    Ok(LodoReport { results, cells })
}

/// Fixed-width table: one row per held-out setting (plus `Average`), one
/// column per method, cells `mean±std` in percent.
pub fn format_table(results: &[RunResult], metric: &str) -> String {
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for r in results.iter().filter(|r| r.metric == metric) {
        if !rows.contains(&r.held_out.as_str()) {
            rows.push(&r.held_out);
        }
        if !cols.contains(&r.method.as_str()) {
            cols.push(&r.method);
        }
    }
    let cell = |row: &str, col: &str| {
        results
            .iter()
            .find(|r| r.metric == metric && r.held_out == row && r.method == col)
            .map_or_else(
                || "-".to_string(),
                |r| format!("{:.2}±{:.2}", 100.0 * r.mean, 100.0 * r.std),
            )
    };
    let first = rows
        .iter()
        .map(|r| r.chars().count() + 3)
        .chain([8])
        .max()
        .unwrap_or(8);
    let widths: Vec<usize> = cols
        .iter()
        .map(|c| {
            rows.iter()
                .map(|r| cell(r, c).chars().count())
                .chain([c.chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<first$}", "target");
    for (c, w) in cols.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for r in &rows {
        let label = if *r == AVERAGE_ROW {
            r.to_string()
        } else {
            format!("-> {r}")
        };
        let _ = write!(out, "{label:<first$}");
        for (c, w) in cols.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", cell(r, c));
        }
        out.push('\n');
    }
    out
}

/// Column order of `episodes.csv`.
pub const EPISODE_COLUMNS: [&str; 8] = [
    "iteration",
    "loss_task_tr",
    "loss_sa",
    "loss_pa",
    "loss_meta",
    "loss_task_metatest",
    "loss_task_unseen",
    "r_ho",
];

/// Writes per-iteration logs as CSV; absent values are empty fields.
/// Floats use the shortest round-trip representation, so equal runs give
/// byte-identical files.
pub fn write_episodes_csv(logs: &[EpisodeLog], path: &Path) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = EPISODE_COLUMNS.join(",");
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.iteration,
            l.loss_task_tr,
            opt(l.loss_sa),
            opt(l.loss_pa),
            opt(l.loss_meta),
            opt(l.loss_task_metatest),
            opt(l.loss_task_unseen),
            opt(l.r_ho)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_episodes_csv`]. Mixing ratios are not
/// stored and come back empty.
pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeLog>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::load(path, e.to_string()))?
        .clone();
    if header.iter().ne(EPISODE_COLUMNS) {
        return Err(Error::load(path, format!("unexpected header {header:?}")));
    }
    let mut logs = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        let bad =
            |col: &str, v: &str| Error::load(path, format!("row {}: bad {col} `{v}`", row + 1));
        let opt = |k: usize| -> Result<Option<f64>> {
            let v = &rec[k];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(EPISODE_COLUMNS[k], v))
            }
        };
        logs.push(EpisodeLog {
            iteration: rec[0].parse().map_err(|_| bad("iteration", &rec[0]))?,
            loss_task_tr: opt(1)?.ok_or_else(|| bad("loss_task_tr", ""))?,
            loss_sa: opt(2)?,
            loss_pa: opt(3)?,
            loss_meta: opt(4)?,
            loss_task_metatest: opt(5)?,
            loss_task_unseen: opt(6)?,
            r_ho: opt(7)?,
            ratios: Vec::new(),
        });
    }
    Ok(logs)
}
