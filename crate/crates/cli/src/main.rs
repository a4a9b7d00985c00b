use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsde::policies::PolicyMapping;
use tsde_cli::config::{load_config, parse_config, ExperimentConfig, Mode};
use tsde_cli::error::CliError;
use tsde_cli::runner::{run_experiment, write_error_record};
use tsde_cli::slope::fit_file;

#[derive(Parser)]
#[command(
    name = "tsde",
    version,
    about = "Thompson sampling with dynamic episodes for restless bandits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file or preset.
    Run(RunArgs),
    /// Estimate average rewards of the configured policy mappings.
    EvalPolicy(RunArgs),
    /// Run the confidence-set and span diagnostics.
    Diagnostics(RunArgs),
    /// Fit a log-log slope to a regret CSV.
    Slope {
        csv: PathBuf,
        #[arg(long)]
        from: Option<usize>,
        #[arg(long)]
        to: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    config: Option<PathBuf>,
    /// Named preset (fig2 or fig3); overrides a preset named in the file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, env = "TSDE_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Policy mapping to run; repeat for several.
    #[arg(long = "mapping")]
    mappings: Vec<PolicyMapping>,
}

impl RunArgs {
    fn load(&self, mode: Option<Mode>) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), preset) => load_config(path, preset.as_deref())?,
            (None, Some(preset)) => parse_config("{}", Some(preset))?,
            (None, None) => {
                return Err(CliError::Config(vec![
                    "a config file or --preset is required".into(),
                ]))
            }
        };
        if let Some(mode) = mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(reps) = self.reps {
            cfg.reps = reps;
        }
        if !self.mappings.is_empty() {
            cfg.mappings = self.mappings.clone();
        }
        let violations = cfg.violations();
        if !violations.is_empty() {
            return Err(CliError::Config(violations));
        }
        Ok(cfg)
    }

    fn output_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

fn run(args: &RunArgs, mode: Option<Mode>) -> Result<(), (CliError, Option<PathBuf>)> {
    let fallback = args.output_dir.clone();
    let cfg = args.load(mode).map_err(|e| (e, fallback))?;
    let dir = args.output_dir(&cfg);
    let report = run_experiment(&cfg, &dir).map_err(|e| (e, Some(dir.clone())))?;
    print!("{}", report.render());
    println!("wrote {}", dir.display());
    Ok(())
}

fn slope(csv: &Path, from: Option<usize>, to: Option<usize>) -> Result<(), CliError> {
    for s in fit_file(csv, from, to)? {
        let label = s.label.as_deref().unwrap_or("regret");
        match &s.fit {
            Ok(f) => println!(
                "{label}: slope {:.4}, intercept {:.4}, R^2 {:.4} ({} points) -> {}",
                f.slope,
                f.intercept,
                f.r_squared,
                f.points,
                s.loglog.display()
            ),
            Err(e) => println!("{label}: no fit ({e})"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a, None),
        Command::EvalPolicy(a) => run(a, Some(Mode::EvalPolicy)),
        Command::Diagnostics(a) => run(a, Some(Mode::Diagnostics)),
        Command::Slope { csv, from, to } => slope(csv, *from, *to).map_err(|e| (e, None)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, dir)) => {
            eprintln!("error: {err}");
            if let Some(dir) = dir {
                write_error_record(&dir, &err);
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
