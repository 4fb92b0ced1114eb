use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modscan::pipeline::{self, EvaluateInput, RunConfig, RunReport};
use modscan::register::EdgeStrategy;
use modscan::Error;

#[derive(Parser)]
#[command(name = "modscan", version, about = "Position-free scanning diffraction imaging through a wavefront modulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a modulated scan dataset from the config's `simulation` section.
    Simulate,
    /// Reconstruct exit waves, probe and per-frame objects from a dataset.
    Reconstruct {
        #[arg(long)]
        dataset: PathBuf,
        /// Calibrated modulator (defaults to the dataset's ground truth).
        #[arg(long)]
        modulator: Option<PathBuf>,
    },
    /// Recover scan positions by registering the reconstructed objects.
    Positions {
        #[arg(long)]
        recon: PathBuf,
        /// Dataset with ground truth, for scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Edge strategy: temporal:K, all_pairs or raster:COLS[:diag].
        #[arg(long)]
        edges: Option<EdgeStrategy>,
    },
    /// Stitch the objects and refine the full field with ePIE.
    Assemble {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// positions.csv from the positions stage.
        #[arg(long)]
        positions: PathBuf,
    },
    /// Calibrate the modulator from a diffuser-scan dataset (simulated from
    /// the config when --dataset is absent).
    Calibrate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Probe prior (defaults to the dataset's ground truth).
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Score recovered positions against ground truth.
    Evaluate {
        /// Pipeline output directory; repeat for a sweep table.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Recovered positions.csv (with --truth, instead of --run).
        #[arg(long, requires = "truth", conflicts_with = "runs")]
        positions: Option<PathBuf>,
        /// Dataset directory with ground truth.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run simulate → reconstruct → positions → assemble → evaluate.
    Pipeline,
}

fn load_config(common: &Common, required: bool) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if required => return Err(Error::Config("--config is required for this command".into())),
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<RunReport, Error> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = c.out.as_path();
    match cli.command {
        Command::Simulate => pipeline::simulate_stage(&load_config(c, true)?, out, c.overwrite),
        Command::Reconstruct { dataset, modulator } => pipeline::reconstruct_stage(
            &load_config(c, false)?,
            &dataset,
            modulator.as_deref(),
            out,
            c.overwrite,
        ),
        Command::Positions { recon, truth, edges } => {
            let mut cfg = load_config(c, false)?;
            if edges.is_some() {
                cfg.positions.strategy = edges;
            }
            pipeline::positions_stage(&cfg, &recon, truth.as_deref(), out, c.overwrite)
        }
        Command::Assemble {
            dataset,
            recon,
            positions,
        } => pipeline::assemble_stage(&load_config(c, false)?, &dataset, &recon, &positions, out, c.overwrite),
        Command::Calibrate { dataset, probe } => pipeline::calibrate_stage(
            &load_config(c, dataset.is_none())?,
            dataset.as_deref(),
            probe.as_deref(),
            out,
            c.overwrite,
        ),
        Command::Evaluate { runs, positions, truth } => {
            let inputs = match (positions, truth) {
                (Some(p), Some(t)) => vec![EvaluateInput {
                    positions: p,
                    truth: t,
                    reports: Vec::new(),
                }],
                _ if !runs.is_empty() => runs.iter().map(|r| EvaluateInput::from_run_dir(r)).collect(),
                _ => return Err(Error::Config("evaluate needs --run or --positions with --truth".into())),
            };
            pipeline::evaluate_stage(&inputs, out, c.overwrite)
        }
        Command::Pipeline => pipeline::pipeline(&load_config(c, true)?, out, c.overwrite),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Physics(_) | Error::Aliased { .. } => 3,
        Error::Disconnected(_) | Error::Graph { .. } | Error::Featureless => 4,
        Error::Diverged { .. } | Error::Divergence(_) => 5,
        Error::Config(_)
        | Error::Format { .. }
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Io { .. }
        | Error::MissingModulator
        | Error::InvalidArgument(_)
        | Error::InvalidField(_)
        | Error::Shape(_)
        | Error::NonFinite(_) => 2,
    }
}

fn summarize(report: &RunReport, out: &Path) {
    let m = &report.metrics;
    let mut parts = vec![format!("{} done in {:.1} s → {}", report.stage, report.wall_time_s, out.display())];
    if let Some(n) = m.n_frames {
        parts.push(format!("  frames: {n}"));
    }
    let fields = [
        ("residual", m.residual),
        ("epie residual", m.epie_residual),
        ("overlap", m.overlap_mean),
        ("mean position error px", m.mean_position_error_px),
        ("nrmse", m.nrmse),
        ("|rho|", m.rho),
        ("grating period px", m.grating_period_px),
        ("spearman", m.spearman),
    ];
    for (name, v) in fields {
        match v {
            Some(v) if v != 0.0 && v.abs() < 1e-2 => parts.push(format!("  {name}: {v:.3e}")),
            Some(v) => parts.push(format!("  {name}: {v:.4}")),
            None => {}
        }
    }
    for w in &report.warnings {
        parts.push(format!("  warning: {w}"));
    }
    println!("{}", parts.join("\n"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.common.out.clone();
    match run(cli) {
        Ok(report) => {
            summarize(&report, &out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
