use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stark_tomo_cli::commands::{self, Context};
use stark_tomo_cli::config::PipelineConfig;
use stark_tomo_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "stark-tomo",
    version,
    about = "Stray- and microwave-field maps from Rydberg-Stark spectra"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (TOML)
    #[arg(long, global = true, default_value = "config/default.toml")]
    config: PathBuf,
    /// Output directory; overrides `output.dir`
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random stream; overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and cache the unit-response basis
    SolveBasis,
    /// Synthesize spectrum stacks, a Rabi campaign and their ground truth
    SynthCampaign,
    /// Fit shift, width and field maps to spectrum stacks
    FitSpectra {
        /// Stack file or directory of `*_stack.csv` (default: <out>/campaign)
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Reconstruct the in-plane stray field from the measurement maps
    ReconstructStray {
        /// Directory of `<label>_shift.csv` maps (default: <out>/spectra)
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit gap and surface charge densities to the measurement maps
    FitCharges {
        /// Directory of `<label>_shift.csv` maps (default: <out>/spectra)
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Potentials that cancel the reconstructed stray field
    Compensate {
        /// Stray-field grid (default: <out>/stray/stray.csv)
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Microwave field map from a Rabi campaign
    MwMap {
        /// Rabi campaign (default: <out>/campaign/rabi.csv)
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run every acceptance check and write a pass/fail report
    Validate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveBasis => "solve-basis",
            Command::SynthCampaign => "synth-campaign",
            Command::FitSpectra { .. } => "fit-spectra",
            Command::ReconstructStray { .. } => "reconstruct-stray",
            Command::FitCharges { .. } => "fit-charges",
            Command::Compensate { .. } => "compensate",
            Command::MwMap { .. } => "mw-map",
            Command::Validate => "validate",
        }
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let ctx = Context::new(cfg, cli.out.clone());
    match &cli.command {
        Command::SolveBasis => commands::solve_basis(&ctx),
        Command::SynthCampaign => commands::synth_campaign(&ctx),
        Command::FitSpectra { input } => commands::fit_spectra(&ctx, input.as_deref()),
        Command::ReconstructStray { input } => commands::reconstruct_stray(&ctx, input.as_deref()),
        Command::FitCharges { input } => commands::fit_charges(&ctx, input.as_deref()),
        Command::Compensate { input } => commands::compensate(&ctx, input.as_deref()),
        Command::MwMap { input } => commands::mw_map(&ctx, input.as_deref()),
        Command::Validate => commands::validate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serialises")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report(cli.command.name()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
