use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpsynth_cli::{cmd_attack, cmd_audit, cmd_evaluate, cmd_generate, CliError, LoadedConfig, RunOptions};
use dpsynth_core::accountant::DpParams;

#[derive(Parser)]
#[command(name = "dpsynth", version, about = "Differentially private synthetic text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Sample without privacy accounting; requires --temperature.
    #[arg(long)]
    non_private: bool,
    /// Sampling temperature for --non-private runs.
    #[arg(long)]
    temperature: Option<f64>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            non_private: self.non_private,
            temperature: self.temperature,
            master_seed: self.seed,
            output_dir: self.output_dir.clone(),
        }
    }
}

#[derive(Args)]
struct AuditArgs {
    /// Read the [privacy] section of this config instead of the flags below.
    #[arg(long, short, conflicts_with_all = ["epsilon", "delta", "max_tokens", "clip_bound", "subset_size"])]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    clip_bound: Option<f64>,
    #[arg(long)]
    subset_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Generate(RunArgs),
    /// Score a corpus by k-shot accuracy and/or structured-output rates.
    Evaluate(RunArgs),
    /// Run the PII extraction or membership-inference attack.
    Attack(RunArgs),
    /// Print the privacy accounting for a parameter set.
    Audit(AuditArgs),
}

fn audit_params(args: &AuditArgs) -> Result<DpParams, CliError> {
    if let Some(path) = &args.config {
        return LoadedConfig::load(path)?.config.privacy.dp_params();
    }
    let missing = |name: &str| CliError::Config(format!("audit needs --{name} (or --config)"));
    Ok(DpParams::new(
        args.epsilon.ok_or_else(|| missing("epsilon"))?,
        args.delta.ok_or_else(|| missing("delta"))?,
        args.max_tokens.ok_or_else(|| missing("max-tokens"))?,
        args.clip_bound.ok_or_else(|| missing("clip-bound"))?,
        args.subset_size.ok_or_else(|| missing("subset-size"))?,
    )?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => {
            let loaded = LoadedConfig::load(&args.config)?;
            let summary = cmd_generate(&loaded, &args.options())?;
            println!(
                "wrote {} records to {}",
                summary.records.len(),
                summary.output_dir.display()
            );
            if let Some(report) = &summary.manifest.accountant {
                println!("{report}");
            } else {
                println!("non-private run, temperature = {}", summary.manifest.sampling.temperature);
            }
        }
        Command::Evaluate(args) => {
            let loaded = LoadedConfig::load(&args.config)?;
            let summary = cmd_evaluate(&loaded, &args.options())?;
            if let Some(r) = &summary.icl {
                println!("{r}");
            }
            if let Some(r) = &summary.structured {
                println!("{r}");
            }
        }
        Command::Attack(args) => {
            let loaded = LoadedConfig::load(&args.config)?;
            println!("{}", cmd_attack(&loaded, &args.options())?);
        }
        Command::Audit(args) => println!("{}", cmd_audit(&audit_params(&args)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
