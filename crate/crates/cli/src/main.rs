use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvpdmp_cli::{
    compare_command, policy_eval_command, simulate_command, value_command, CliError, ExperimentConfig, Outcome,
    Overrides,
};

#[derive(Parser, Debug)]
#[command(name = "mvpdmp", version, about = "Stopping experiments on growing and dividing cell populations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving the artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long, global = true)]
    json: bool,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct OverrideArgs {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo replications.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Grid points on [0, t_max].
    #[arg(long, global = true)]
    nbpt: Option<usize>,
    /// Fixed time horizon of the grid.
    #[arg(long, global = true)]
    tmax: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Number of jumps n.
    #[arg(long, global = true)]
    horizon: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate trajectories.
    Simulate,
    /// Compute V_n at the initial state.
    Value,
    /// Monte Carlo evaluation of the epsilon-optimal stopping time.
    PolicyEval,
    /// Population against tagged-cell values.
    Compare,
}

fn write_artifacts(dir: &Path, outcome: &Outcome) -> Result<(), CliError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for a in &outcome.artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.contents).map_err(io(&path))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Option<CliError>, CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let o = &cli.overrides;
    config.apply(&Overrides {
        seed: o.seed,
        samples: o.samples,
        nbpt: o.nbpt,
        tmax: o.tmax,
        epsilon: o.epsilon,
        horizon: o.horizon,
    });
    let outcome = match cli.command {
        Command::Simulate => simulate_command(&config)?,
        Command::Value => value_command(&config)?,
        Command::PolicyEval => policy_eval_command(&config)?,
        Command::Compare => compare_command(&config)?,
    };
    if let Some(dir) = &cli.out {
        write_artifacts(dir, &outcome)?;
    }
    if cli.json {
        print!("{}", outcome.json);
    } else {
        print!("{}", outcome.table);
    }
    Ok(outcome.failure)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(e)) | Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
