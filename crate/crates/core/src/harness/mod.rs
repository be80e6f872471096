//! Experiment orchestration: JSON configs, seeded experiment grids
//! (method x scenario x imbalance x seed) and on-disk run artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! <out>/<hash>/config.json      the cell's canonical config
//! <out>/<hash>/record.jsonl     one EpochRecord per line (renamed into place on success)
//! <out>/<hash>/checkpoint.bin   network, optimizer and memory bank
//! <out>/summary.csv             mean and std of final metrics per grid cell
//! ```

mod persist;
mod report;

use std::fs;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::datasynth::{apply_class_imbalance, make_domain_pair, DomainPair, Scenario, ShiftSpec};
use crate::error::{Error, Result};
use crate::trainer::{
    content_hash, train_with_observer, EpochRecord, RunRecord, TrainConfig, TrainObserver, TrainerSnapshot,
};

pub use persist::{load_checkpoint, read_record, save_checkpoint, write_canonical_json, Checkpoint};
pub use report::{
    collect_runs, curves, render_summary, summarize, write_curves, write_summary, MetricsRow, RunSummary, Stat,
    SummaryRow,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "GET_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub shift: ShiftSpec,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub scenarios: Vec<Scenario>,
    /// Fraction kept of each leading-half target class; 1.0 leaves the target balanced.
    pub keep_fractions: Vec<f64>,
    /// Labeled target samples per class, used by SSDA cells only.
    pub shots_per_class: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write a checkpoint every k epochs (0: only after the last epoch).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        presets::imbalanced_uda()
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        self.train.validate()?;
        for (name, empty) in [
            ("methods", self.methods.is_empty()),
            ("scenarios", self.scenarios.is_empty()),
            ("keep_fractions", self.keep_fractions.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::invalid(format!("{name} must not be empty")));
            }
        }
        if let Some(k) = self.keep_fractions.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
            return Err(Error::invalid(format!("keep fraction {k} outside (0, 1]")));
        }
        if self.scenarios.contains(&Scenario::Ssda) && self.shots_per_class == 0 {
            return Err(Error::invalid("SSDA cells need shots_per_class >= 1"));
        }
        Ok(())
    }

    /// Every run of the grid, in method, scenario, keep fraction, seed order.
    pub fn cells(&self) -> Vec<CellConfig> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            for &scenario in &self.scenarios {
                for &keep_fraction in &self.keep_fractions {
                    for &seed in &self.seeds {
                        cells.push(CellConfig::new(self, method, scenario, keep_fraction, seed));
                    }
                }
            }
        }
        cells
    }
}

/// One concrete run. Its content hash names the output subdirectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub shift: ShiftSpec,
    pub train: TrainConfig,
    pub scenario: Scenario,
    pub keep_fraction: f64,
    pub shots_per_class: usize,
}

impl CellConfig {
    /// The seed drives both data generation and training.
    pub fn new(config: &ExperimentConfig, method: Method, scenario: Scenario, keep_fraction: f64, seed: u64) -> Self {
        let mut shift = config.shift.clone();
        shift.seed = seed;
        let mut train = config.train.clone();
        train.method = method;
        train.seed = seed;
        Self {
            shift,
            train,
            scenario,
            keep_fraction,
            shots_per_class: if scenario == Scenario::Ssda { config.shots_per_class } else { 0 },
        }
    }

    pub fn method(&self) -> Method {
        self.train.method
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn domain_pair(&self) -> Result<DomainPair> {
        let pair = make_domain_pair(&self.shift, self.scenario, self.shots_per_class)?;
        if self.keep_fraction < 1.0 {
            apply_class_imbalance(&pair, self.keep_fraction)
        } else {
            Ok(pair)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Completed,
    /// A finished record with the same hash already existed.
    Skipped,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: CellConfig,
    pub hash: String,
    pub status: CellStatus,
    /// Full record on success or skip; whatever was recorded on failure.
    pub record: Option<RunRecord>,
}

const RECORD_FILE: &str = "record.jsonl";
const PARTIAL_RECORD_FILE: &str = "record.jsonl.partial";
const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const ERROR_FILE: &str = "error.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.csv";

/// Creates `dir` and proves it is writable.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Streams epoch records to JSONL and writes periodic checkpoints.
struct CellWriter {
    dir: PathBuf,
    hash: String,
    checkpoint_every: usize,
    last_epoch: usize,
    jsonl: BufWriter<fs::File>,
}

impl TrainObserver for CellWriter {
    fn on_epoch_end(&mut self, record: &EpochRecord, state: &TrainerSnapshot<'_>) -> Result<()> {
        let path = self.dir.join(PARTIAL_RECORD_FILE);
        serde_json::to_writer(&mut self.jsonl, record)?;
        writeln!(self.jsonl).and_then(|_| self.jsonl.flush()).map_err(|e| Error::io(&path, e))?;
        let periodic = self.checkpoint_every > 0 && record.epoch > 0 && record.epoch.is_multiple_of(self.checkpoint_every);
        if periodic || record.epoch == self.last_epoch {
            persist::save_snapshot(&self.dir.join(CHECKPOINT_FILE), &self.hash, record.epoch, state)?;
        }
        Ok(())
    }
}

/// Runs one cell into `<out>/<hash>/`, or reads it back if it already finished.
pub fn run_cell(cell: &CellConfig, out: &Path, checkpoint_every: usize) -> Result<CellOutcome> {
    let hash = cell.hash();
    let dir = out.join(&hash);
    let finished = dir.join(RECORD_FILE);
    if finished.exists() {
        log::info!("{hash}: already complete, skipping");
        return Ok(CellOutcome {
            record: Some(RunRecord {
                method: cell.method(),
                config_hash: hash.clone(),
                epochs: read_record(&finished)?,
            }),
            cell: cell.clone(),
            hash,
            status: CellStatus::Skipped,
        });
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_canonical_json(&dir.join(CONFIG_FILE), cell)?;
    let partial = dir.join(PARTIAL_RECORD_FILE);
    let file = fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut writer = CellWriter {
        dir: dir.clone(),
        hash: hash.clone(),
        checkpoint_every,
        last_epoch: cell.train.epochs,
        jsonl: BufWriter::new(file),
    };
    let pair = cell.domain_pair()?;
    log::info!(
        "{hash}: training {} / {} / keep {} / seed {}",
        cell.method(),
        cell.scenario,
        cell.keep_fraction,
        cell.seed()
    );
    match train_with_observer(&cell.train, &pair, &mut writer) {
        Ok(record) => {
            drop(writer);
            fs::rename(&partial, &finished).map_err(|e| Error::io(&finished, e))?;
            Ok(CellOutcome {
                cell: cell.clone(),
                hash,
                status: CellStatus::Completed,
                record: Some(record),
            })
        }
        Err(failure) => {
            let message = failure.error.to_string();
            let path = dir.join(ERROR_FILE);
            fs::write(&path, format!("{message}\n")).map_err(|e| Error::io(&path, e))?;
            Ok(CellOutcome {
                cell: cell.clone(),
                hash,
                status: CellStatus::Failed(message),
                record: Some(failure.partial),
            })
        }
    }
}

/// Like [`run_cell`], but converts errors and panics into a failed outcome.
fn run_cell_isolated(cell: &CellConfig, out: &Path, checkpoint_every: usize) -> CellOutcome {
    let failed = |message: String| CellOutcome {
        cell: cell.clone(),
        hash: cell.hash(),
        status: CellStatus::Failed(message),
        record: None,
    };
    let outcome = match catch_unwind(AssertUnwindSafe(|| run_cell(cell, out, checkpoint_every))) {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(e)) => failed(e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            failed(format!("panic: {msg}"))
        }
    };
    if let CellStatus::Failed(msg) = &outcome.status {
        log::error!("{}: {msg}", outcome.hash);
    }
    outcome
}

/// Worker count from [`THREADS_ENV`], falling back to the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct MatrixOutcome {
    pub cells: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every cell of the grid (in parallel, one output directory per cell),
/// then writes `summary.csv`. A failing cell is recorded and skipped over.
pub fn run_matrix(config: &ExperimentConfig) -> Result<MatrixOutcome> {
    config.validate()?;
    let out = config.output_dir.as_path();
    ensure_writable(out)?;
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::State(e.to_string()))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell_isolated(cell, out, config.checkpoint_every))
            .collect()
    });
    let runs: Vec<RunSummary> = outcomes.iter().map(RunSummary::from_outcome).collect();
    let summary = summarize(&runs);
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    Ok(MatrixOutcome {
        cells: outcomes,
        summary,
    })
}

/// Rebuilds `summary.csv` and `curves.csv` from the finished cells under `out`.
pub fn report(out: &Path) -> Result<(Vec<SummaryRow>, Vec<MetricsRow>)> {
    let runs = collect_runs(out)?;
    let summary = summarize(&runs);
    let rows = curves(&runs);
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    write_curves(&out.join(CURVES_FILE), &rows)?;
    Ok((summary, rows))
}

/// Named experiment presets.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 2] = ["imbalanced-uda", "uda"];

    /// The synthetic imbalanced UDA benchmark: 6 classes in 16 dimensions,
    /// target tilted by pi/5, shifted and shrunk, leading three target classes
    /// thinned to 30%.
    pub fn imbalanced_uda() -> ExperimentConfig {
        ExperimentConfig {
            shift: benchmark_shift(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            methods: vec![Method::Get, Method::Nc, Method::Pl, Method::SourceOnly],
            scenarios: vec![Scenario::Uda],
            keep_fractions: vec![0.3],
            shots_per_class: 3,
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }

    /// Same geometry with a balanced target.
    pub fn uda() -> ExperimentConfig {
        ExperimentConfig {
            keep_fractions: vec![1.0],
            ..imbalanced_uda()
        }
    }

    pub fn benchmark_shift() -> ShiftSpec {
        let dim = 16;
        let mut translation = vec![0.0; dim];
        translation[0] = 1.5;
        translation[2] = 3.0;
        ShiftSpec {
            class_count: 6,
            dim,
            samples_per_class_source: 100,
            samples_per_class_target: 100,
            rotation_angle: std::f64::consts::PI / 5.0,
            translation,
            scale: 0.7,
            source_noise_std: 0.8,
            target_noise_std: 0.8,
            seed: 0,
        }
    }

    pub fn by_name(name: &str) -> Result<ExperimentConfig> {
        match name {
            "imbalanced-uda" => Ok(imbalanced_uda()),
            "uda" => Ok(uda()),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (known: {})",
                NAMES.join(", ")
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut shift = presets::benchmark_shift();
        shift.dim = 4;
        shift.class_count = 3;
        shift.translation = vec![0.5, 0.0, 0.0, 0.0];
        shift.samples_per_class_source = 12;
        shift.samples_per_class_target = 12;
        ExperimentConfig {
            shift,
            train: TrainConfig {
                epochs: 2,
                hidden: vec![8, 4],
                batch_size: 8,
                ..TrainConfig::default()
            },
            methods: vec![Method::Get, Method::SourceOnly],
            scenarios: vec![Scenario::Uda],
            keep_fractions: vec![1.0],
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::new(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = presets::imbalanced_uda();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        // partial files fall back to the defaults
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds": [4]}"#).unwrap();
        assert_eq!(partial.seeds, vec![4]);
        assert_eq!(partial.shift, c.shift);
    }

    #[test]
    fn cell_hashes_identify_runs() {
        let c = tiny();
        let cells = c.cells();
        assert_eq!(cells.len(), 6);
        let mut hashes: Vec<String> = cells.iter().map(CellConfig::hash).collect();
        assert_eq!(hashes[0], cells[0].clone().hash());
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 6);
        // irrelevant SSDA shots do not change UDA hashes
        let other = ExperimentConfig {
            shots_per_class: 9,
            ..c.clone()
        };
        assert_eq!(other.cells()[0].hash(), cells[0].hash());
    }

    #[test]
    fn validation_catches_empty_grids() {
        let mut c = tiny();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.keep_fractions = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.scenarios = vec![Scenario::Ssda];
        c.shots_per_class = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn matrix_counts_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.output_dir = dir.path().to_path_buf();
        let first = run_matrix(&c).unwrap();
        assert_eq!(first.cells.len(), 6);
        assert!(first.cells.iter().all(|o| o.status == CellStatus::Completed));
        assert_eq!(first.summary.len(), 2);
        for o in &first.cells {
            let d = dir.path().join(&o.hash);
            assert!(d.join(RECORD_FILE).exists() && d.join(CONFIG_FILE).exists() && d.join(CHECKPOINT_FILE).exists());
        }
        // summary means are the plain average of the per-seed final epochs on disk
        for row in &first.summary {
            let finals: Vec<f64> = first
                .cells
                .iter()
                .filter(|o| o.cell.method() == row.method)
                .map(|o| read_record(&dir.path().join(&o.hash).join(RECORD_FILE)).unwrap().last().unwrap().accuracy)
                .collect();
            let by_hand = finals.iter().sum::<f64>() / finals.len() as f64;
            assert!((row.accuracy.unwrap().mean - by_hand).abs() < 1e-12);
        }
        let second = run_matrix(&c).unwrap();
        assert!(second.cells.iter().all(|o| o.status == CellStatus::Skipped));
        assert_eq!(first.summary, second.summary);
    }

    #[test]
    fn unwritable_output_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let mut c = tiny();
        c.output_dir = blocker.join("out");
        assert!(matches!(run_matrix(&c), Err(Error::Io { .. })));
    }

    #[test]
    fn failing_cell_does_not_stop_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.output_dir = dir.path().to_path_buf();
        c.seeds = vec![0];
        // a plain file where the first cell's directory should go
        let cells = c.cells();
        fs::write(dir.path().join(cells[0].hash()), b"not a directory").unwrap();
        let out = run_matrix(&c).unwrap();
        assert!(matches!(out.cells[0].status, CellStatus::Failed(_)));
        assert_eq!(out.cells[1].status, CellStatus::Completed);
    }
}
