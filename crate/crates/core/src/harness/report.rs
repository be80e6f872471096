use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{read_record, CellConfig, CellOutcome, CellStatus, CONFIG_FILE, RECORD_FILE};
use crate::baselines::Method;
use crate::datasynth::Scenario;
use crate::error::{Error, Result};
use crate::trainer::EpochRecord;

/// One run as seen by the reports.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub hash: String,
    pub cell: CellConfig,
    pub failed: bool,
    pub epochs: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn from_outcome(outcome: &CellOutcome) -> Self {
        let failed = matches!(outcome.status, CellStatus::Failed(_));
        Self {
            hash: outcome.hash.clone(),
            cell: outcome.cell.clone(),
            failed,
            epochs: outcome.record.as_ref().map(|r| r.epochs.clone()).unwrap_or_default(),
        }
    }
}

/// Reads every cell directory under `out`. Directories without a finished
/// record count as failed runs.
pub fn collect_runs(out: &Path) -> Result<Vec<RunSummary>> {
    let entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    let mut runs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let dir = entry.path();
        let config = dir.join(CONFIG_FILE);
        if !dir.is_dir() || !config.exists() {
            continue;
        }
        let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
        let cell: CellConfig = serde_json::from_str(&text)?;
        let record = dir.join(RECORD_FILE);
        let (failed, epochs) = if record.exists() {
            (false, read_record(&record)?)
        } else {
            (true, Vec::new())
        };
        runs.push(RunSummary {
            hash: entry.file_name().to_string_lossy().into_owned(),
            cell,
            failed,
            epochs,
        });
    }
    runs.sort_by(|a, b| a.hash.cmp(&b.hash));
    Ok(runs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// Final-epoch metrics aggregated over seeds for one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub scenario: Scenario,
    pub keep_fraction: f64,
    pub runs: usize,
    pub failed: usize,
    pub accuracy: Option<Stat>,
    pub balanced_accuracy: Option<Stat>,
    pub pseudo_label_accuracy: Option<Stat>,
    pub prior_kl: Option<Stat>,
}

fn scenario_rank(s: Scenario) -> u8 {
    match s {
        Scenario::Uda => 0,
        Scenario::Pda => 1,
        Scenario::Ssda => 2,
    }
}

/// Groups runs by (method, scenario, keep fraction), in that sort order.
pub fn summarize(runs: &[RunSummary]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, u8, u64), Vec<&RunSummary>> = BTreeMap::new();
    for run in runs {
        let key = (
            run.cell.method(),
            scenario_rank(run.cell.scenario),
            run.cell.keep_fraction.to_bits(),
        );
        groups.entry(key).or_default().push(run);
    }
    groups
        .into_values()
        .map(|group| {
            let ok: Vec<&EpochRecord> = group
                .iter()
                .filter(|r| !r.failed)
                .filter_map(|r| r.epochs.last())
                .collect();
            let stat = |f: &dyn Fn(&EpochRecord) -> Option<f64>| {
                Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                method: group[0].cell.method(),
                scenario: group[0].cell.scenario,
                keep_fraction: group[0].cell.keep_fraction,
                runs: group.len(),
                failed: group.iter().filter(|r| r.failed).count(),
                accuracy: stat(&|r| Some(r.accuracy)),
                balanced_accuracy: stat(&|r| Some(r.balanced_accuracy)),
                pseudo_label_accuracy: stat(&|r| r.pseudo_label_accuracy),
                prior_kl: stat(&|r| r.prior_kl),
            }
        })
        .collect()
}

fn push_stat(line: &mut String, stat: Option<Stat>) {
    match stat {
        Some(s) => write!(line, ",{:.6},{:.6}", s.mean, s.std).unwrap(),
        None => line.push_str(",,"),
    }
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,scenario,keep_fraction,runs,failed,accuracy_mean,accuracy_std,\
         balanced_accuracy_mean,balanced_accuracy_std,pseudo_label_accuracy_mean,\
         pseudo_label_accuracy_std,prior_kl_mean,prior_kl_std\n",
    );
    for r in rows {
        let mut line = format!("{},{},{},{},{}", r.method, r.scenario, r.keep_fraction, r.runs, r.failed);
        push_stat(&mut line, r.accuracy);
        push_stat(&mut line, r.balanced_accuracy);
        push_stat(&mut line, r.pseudo_label_accuracy);
        push_stat(&mut line, r.prior_kl);
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::write(path, render_summary(rows)).map_err(|e| Error::io(path, e))
}

/// One epoch of one run, flattened for plotting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub hash: String,
    pub method: Method,
    pub scenario: Scenario,
    pub keep_fraction: f64,
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub generative_label_accuracy: Option<f64>,
    pub prior_kl: Option<f64>,
}

pub fn curves(runs: &[RunSummary]) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = runs
        .iter()
        .flat_map(|run| {
            run.epochs.iter().map(move |e| MetricsRow {
                hash: run.hash.clone(),
                method: run.cell.method(),
                scenario: run.cell.scenario,
                keep_fraction: run.cell.keep_fraction,
                seed: run.cell.seed(),
                epoch: e.epoch,
                accuracy: e.accuracy,
                balanced_accuracy: e.balanced_accuracy,
                per_class_recall: e.per_class_recall.clone(),
                pseudo_label_accuracy: e.pseudo_label_accuracy,
                generative_label_accuracy: e.generative_label_accuracy,
                prior_kl: e.prior_kl,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.method, scenario_rank(a.scenario), a.seed, &a.hash, a.epoch)
            .cmp(&(b.method, scenario_rank(b.scenario), b.seed, &b.hash, b.epoch))
            .then(a.keep_fraction.total_cmp(&b.keep_fraction))
    });
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_curves(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(
        "hash,method,scenario,keep_fraction,seed,epoch,accuracy,balanced_accuracy,\
         per_class_recall,pseudo_label_accuracy,generative_label_accuracy,prior_kl\n",
    );
    for r in rows {
        let recall: Vec<String> = r.per_class_recall.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{},{}",
            r.hash,
            r.method,
            r.scenario,
            r.keep_fraction,
            r.seed,
            r.epoch,
            r.accuracy,
            r.balanced_accuracy,
            recall.join(";"),
            opt(r.pseudo_label_accuracy),
            opt(r.generative_label_accuracy),
            opt(r.prior_kl)
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
