use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use get_core::harness::{self, presets, CellConfig, CellStatus, ExperimentConfig, SummaryRow};
use get_core::{Error, Method, Result, Scenario};

#[derive(Parser)]
#[command(name = "get-da", version, about = "Synthetic domain-adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one domain pair and write it as CSV (stdout unless --out).
    Synth(Overrides),
    /// Train a single cell: the first method, scenario, imbalance and seed.
    Train(Overrides),
    /// Run the full method x scenario x imbalance x seed grid.
    Matrix(Overrides),
    /// Rebuild summary.csv and curves.csv from an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// JSON experiment config; missing keys take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given.
    #[arg(long, default_value = "imbalanced-uda")]
    preset: String,
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<Scenario>,
    /// Keep fraction of the leading half of the target classes (1 = balanced).
    #[arg(long, value_delimiter = ',')]
    imbalance: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    gamma_q: Option<f64>,
    #[arg(long)]
    gamma_pi: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => presets::by_name(&self.preset)?,
        };
        if !self.method.is_empty() {
            c.methods = self.method.clone();
        }
        if !self.scenario.is_empty() {
            c.scenarios = self.scenario.clone();
        }
        if !self.imbalance.is_empty() {
            c.keep_fractions = self.imbalance.clone();
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(g) = self.gamma_q {
            c.train.gamma_q = g;
        }
        if let Some(g) = self.gamma_pi {
            c.train.gamma_pi = g;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn first_cell(&self) -> Result<(ExperimentConfig, CellConfig)> {
        let c = self.resolve()?;
        let cell = CellConfig::new(&c, c.methods[0], c.scenarios[0], c.keep_fractions[0], c.seeds[0]);
        Ok((c, cell))
    }
}

fn print_summary(rows: &[SummaryRow]) {
    for r in rows {
        let acc = r.accuracy.map_or("-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        let bal = r
            .balanced_accuracy
            .map_or("-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        println!(
            "{:<12} {:<5} keep {:<4} runs {:>2} failed {:>2}  acc {acc}  balanced {bal}",
            r.method.name(),
            r.scenario,
            r.keep_fraction,
            r.runs,
            r.failed
        );
    }
}

fn synth(args: &Overrides) -> Result<()> {
    let (_, cell) = args.first_cell()?;
    let pair = cell.domain_pair()?;
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            pair.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            pair.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn train(args: &Overrides) -> Result<bool> {
    let (config, cell) = args.first_cell()?;
    harness::ensure_writable(&config.output_dir)?;
    let outcome = harness::run_cell(&cell, &config.output_dir, config.checkpoint_every)?;
    let dir = config.output_dir.join(&outcome.hash);
    match &outcome.status {
        CellStatus::Failed(msg) => {
            eprintln!("run {} failed: {msg}", outcome.hash);
            Ok(false)
        }
        status => {
            if let Some(last) = outcome.record.as_ref().and_then(|r| r.last()) {
                println!("{}", serde_json::to_string(last)?);
            }
            if *status == CellStatus::Skipped {
                log::info!("reused finished run in {}", dir.display());
            }
            eprintln!("{}", dir.display());
            Ok(true)
        }
    }
}

fn matrix(args: &Overrides) -> Result<bool> {
    let config = args.resolve()?;
    let outcome = harness::run_matrix(&config)?;
    print_summary(&outcome.summary);
    let failed: Vec<_> = outcome
        .cells
        .iter()
        .filter_map(|o| match &o.status {
            CellStatus::Failed(msg) => Some((o.hash.as_str(), msg.as_str())),
            _ => None,
        })
        .collect();
    for (hash, msg) in &failed {
        eprintln!("cell {hash} failed: {msg}");
    }
    eprintln!("{}", config.output_dir.join(harness::SUMMARY_FILE).display());
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => synth(args).map(|_| true),
        Command::Train(args) => train(args),
        Command::Matrix(args) => matrix(args),
        Command::Report { out } => harness::report(out).map(|(summary, _)| {
            print_summary(&summary);
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
