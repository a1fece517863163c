use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use glycodrive::pipeline::{run_pipeline, PipelineConfig, Stage};
use glycodrive::synth;
use log::info;

/// Glucose-aware stop-behavior analytics for naturalistic driving data.
#[derive(Parser)]
#[command(name = "glycodrive", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster stop-sign detections and reconcile with the intersection database.
    Intersections(RunArgs),
    /// Clean CGM series and report wear compliance.
    Cgm(RunArgs),
    /// Join glucose state onto telemetry (runs cgm first).
    Fusion(RunArgs),
    /// Extract and classify intersection encounters (runs its prerequisites).
    Encounters(RunArgs),
    /// Fit the partition models and compare random-effect structures.
    Models(RunArgs),
    /// Group-deletion influence on the selected models.
    Influence(RunArgs),
    /// Run the stages listed in the configuration, or those given by --stage.
    Run(RunArgs),
    /// Write a synthetic corpus and its configuration.
    Synth {
        #[arg(long, default_value_t = 20_240_601)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage to run; repeat for several. Overrides `stages` in the configuration.
    #[arg(long = "stage")]
    stages: Vec<String>,
}

fn run(args: RunArgs, only: Option<Stage>) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(out) = args.out {
        config = config.with_output_dir(out);
    }
    let requested: Vec<Stage> = args.stages.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    if let Some(s) = only {
        config = config.with_stages(vec![s]);
    } else if !requested.is_empty() {
        config = config.with_stages(requested);
    }
    let report = run_pipeline(&config)?;
    let dir = config.output_dir.display();
    println!("stages: {}", report.stages.join(", "));
    println!("wrote {dir}/report.json and {dir}/report.txt");
    if !report.ledger_balanced() {
        anyhow::bail!("conservation ledger does not balance; see {dir}/report.txt");
    }
    for w in &report.warnings {
        info!("{w}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Intersections(a) => run(a, Some(Stage::Intersections)),
        Command::Cgm(a) => run(a, Some(Stage::Cgm)),
        Command::Fusion(a) => run(a, Some(Stage::Fusion)),
        Command::Encounters(a) => run(a, Some(Stage::Encounters)),
        Command::Models(a) => run(a, Some(Stage::Models)),
        Command::Influence(a) => run(a, Some(Stage::Influence)),
        Command::Run(a) => run(a, None),
        Command::Synth { seed, out } => synth::write_corpus(&synth::generate(seed), &out)
            .with_context(|| format!("writing corpus to {}", out.display()))
            .map(|()| println!("wrote synthetic corpus (seed {seed}) to {}", out.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
