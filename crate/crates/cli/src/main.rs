mod commands;
mod config;
mod error;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::commands::Output;
use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Mean-field predictions and sampled-network spectra of Fisher information
/// matrices, neural tangent kernels and input metrics.
#[derive(Parser, Debug)]
#[command(name = "fimspec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in configuration: fig3a, fig3b, fig4-tanh, fig4-relu, fig4-linear, fig5, fig6, fig7
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Overrides the configured seed
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Overrides the configured number of trials
    #[arg(long, global = true, value_name = "T")]
    trials: Option<usize>,

    /// Output directory; defaults to the configured one, then out/<command>
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for trials; defaults to all cores
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Order parameters per layer and the derived constants
    Orderparams,
    /// Predicted eigenvalue statistics for the configured kinds
    Predict,
    /// Ensemble spectra, pooled histograms and a summary
    Spectrum,
    /// Theory against experiment over a width sweep
    Compare,
    /// Kernel-regime training simulation next to gradient descent
    Train,
    /// NTK spectra over sample sizes, with and without mean subtraction
    NtkScaling,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Orderparams => "orderparams",
            Command::Predict => "predict",
            Command::Spectrum => "spectrum",
            Command::Compare => "compare",
            Command::Train => "train",
            Command::NtkScaling => "ntk-scaling",
        }
    }
}

fn run(cli: Cli) -> Result<Output, CliError> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    // parallelism stays at the trial level so results do not depend on the thread count
    faer::set_global_parallelism(faer::Par::Seq);

    let (text, source) = match (&cli.config, &cli.preset) {
        (Some(path), _) => (config::read_config_file(path)?, path.display().to_string()),
        (None, Some(name)) => (config::preset_text(name)?.to_string(), format!("preset {name}")),
        (None, None) => return Err(CliError::Usage("pass --config PATH or --preset NAME".into())),
    };
    let mut cfg = ExperimentConfig::parse(&text, &source)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    let dir = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    cfg.out = Some(dir.clone());
    cfg.check(&source)?;

    let mut out = Output::create(&dir)?;
    out.write("config.toml", &text)?;
    out.write("resolved.toml", &cfg.to_toml())?;
    match cli.command {
        Command::Orderparams => commands::orderparams(&cfg, &mut out)?,
        Command::Predict => commands::predict(&cfg, &mut out)?,
        Command::Spectrum => commands::spectrum(&cfg, &mut out)?,
        Command::Compare => commands::compare(&cfg, &mut out)?,
        Command::Train => commands::train(&cfg, &mut out)?,
        Command::NtkScaling => commands::ntk_scaling(&cfg, &mut out)?,
    }
    Ok(out)
}

fn fail(err: &CliError) -> ExitCode {
    let _ = writeln!(std::io::stderr(), "{}", err.to_json());
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string().trim_end().to_string())),
    };
    match run(cli) {
        Ok(out) => {
            let summary = json!({ "status": "ok", "out": out.dir().display().to_string(), "files": out.files() });
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
