use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transformed_control::pipeline::{LoadedConfig, Overrides, Pipeline, PipelineError, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "tcontrol", version, about = "Agent-as-control-group score analysis pipeline")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "tcontrol.toml")]
    config: PathBuf,
    /// Output subdirectory; overrides `run_id` in the config.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load every input and report problems without running anything.
    Validate,
    /// Draw exams for every bank year.
    Sample,
    /// Ask the agent every sampled question.
    RunAgent(AgentArgs),
    /// Grade responses and convert to the common score scale.
    Grade,
    /// Compute OLS, mean-difference and Bayesian estimates.
    Estimate,
    /// Train and apply the difficulty classifier.
    Classify,
    /// Write the consolidated report bundle.
    Report,
    /// Run every stage in order.
    Run(AgentArgs),
}

#[derive(Args)]
struct AgentArgs {
    /// Chat completions endpoint; implies live mode.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Use the offline mock agent.
    #[arg(long, requires = "accuracy_file")]
    mock: bool,
    /// `year,accuracy` CSV for the mock agent.
    #[arg(long, requires = "mock")]
    accuracy_file: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Keep responses from an interrupted run and ask only the missing
    /// questions. `run` always resumes.
    #[arg(long)]
    resume: bool,
}

fn stage_of(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Sample => Stage::Sample,
        Command::RunAgent(_) => Stage::RunAgent,
        Command::Grade => Stage::Grade,
        Command::Estimate => Stage::Estimate,
        Command::Classify => Stage::Classify,
        Command::Report => Stage::Report,
        Command::Validate | Command::Run(_) => return None,
    })
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let loaded = LoadedConfig::load(&cli.config)?;
    let mut overrides = Overrides {
        run_id: cli.run_id,
        seed: cli.seed,
        ..Overrides::default()
    };
    let mut resume = true;
    if let Command::RunAgent(a) | Command::Run(a) = &cli.command {
        overrides.endpoint = a.endpoint.clone();
        overrides.model = a.model.clone();
        overrides.concurrency = a.concurrency;
        if a.mock {
            overrides.mock_accuracy = a.accuracy_file.clone();
        }
        resume = a.resume || matches!(cli.command, Command::Run(_));
    }
    let mut pipeline = Pipeline::open(loaded, overrides)?;
    pipeline.resume = resume;

    match (&cli.command, stage_of(&cli.command)) {
        (Command::Validate, _) => {
            for line in pipeline.validate()? {
                println!("{line}");
            }
            println!("ok");
        }
        (Command::Run(_), _) => {
            pipeline.run_all()?;
            println!("{}", pipeline.run_dir.display());
        }
        (_, Some(stage)) => match pipeline.run_stage(stage)? {
            StageOutcome::Completed => println!("{}: done", stage.name()),
            StageOutcome::UpToDate => println!("{}: already complete for this config, nothing to do", stage.name()),
        },
        (_, None) => unreachable!("every other command maps to a stage"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
