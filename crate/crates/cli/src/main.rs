use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use npmatch_cli::divergence::DivergenceCheck;
use npmatch_cli::{divergence, eval, gradcheck, train, CliError, RunConfigFile};

#[derive(Parser)]
#[command(name = "npmatch", version, about = "Neural-process pseudo-labeling experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-key override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, out_dir: Option<&PathBuf>) -> Result<RunConfigFile, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(dir) = out_dir {
            overrides.push(format!("out_dir={}", toml::Value::String(dir.display().to_string())));
        }
        RunConfigFile::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, report.json and checkpoint.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Suppress per-interval progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Compare closed-form JS divergences with Monte-Carlo estimates.
    CheckDivergence {
        /// Largest dimension drawn.
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Monte-Carlo samples per estimate.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_error: bool,
    },
    /// Finite-difference check of every analytic gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the configured dataset and its split as CSV (x1,x2,label,split).
    Dataset {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Ok(true) when every requested check passed.
fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Train { config, out_dir, quiet } => {
            let cfg = config.resolve(out_dir.as_ref())?;
            let report = train::run(&cfg, quiet)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            for p in train::artifact_paths(&cfg) {
                eprintln!("wrote {}", p.display());
            }
            Ok(true)
        }
        Command::CheckDivergence {
            dims,
            trials,
            samples,
            seed,
            inject_error,
        } => {
            let report = divergence::run(&DivergenceCheck {
                max_dim: dims,
                trials,
                samples,
                seed,
                inject_error,
            })?;
            print!("{}", report.table());
            println!("{} of {} comparisons within {} standard errors", report.rows.len() - report.failures(), report.rows.len(), divergence::MAX_Z);
            Ok(report.passed())
        }
        Command::GradCheck { seed } => {
            let report = gradcheck::run(seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.passed)
        }
        Command::Dataset { config, out } => {
            let cfg = config.resolve(None)?;
            let data = cfg.data_config().generate(cfg.seed)?;
            match out {
                Some(p) => data.write_csv(std::fs::File::create(p)?)?,
                None => data.write_csv(std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Eval { checkpoint, config } => {
            let cfg = config.resolve(None)?;
            let out = eval::run(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
