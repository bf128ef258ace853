use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffprop::io::write_atomic;
use diffprop::pipeline::{merge_reports, ExperimentManifest, Run, Stage};
use diffprop::Error;

/// Property inference on diffusion-model samples, and a sampling-time
/// defense against it.
#[derive(Parser)]
#[command(name = "diffprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Root seed; overrides the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun even when the stage's inputs are unchanged.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, shadow and test splits with a proportion sidecar.
    DatasetGen(RunArgs),
    /// Train the diffusion model (and property classifiers for points).
    Train(RunArgs),
    /// Draw undefended samples with every configured sampler.
    Sample(RunArgs),
    /// Estimate every predicate's proportion from the samples.
    Attack(RunArgs),
    /// Fit the defense hyperplanes.
    DefendFit(RunArgs),
    /// Draw defended samples and score them against the targets.
    DefendSample(RunArgs),
    /// Utility metrics of real, undefended and defended samples.
    Eval(RunArgs),
    /// Every stage in order.
    Run(RunArgs),
    /// Merge run directories into a long-format CSV and plot series.
    Report {
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv and plots.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset manifest: adult, churn, toy or mixture.
    Init {
        /// adult, churn, toy or mixture (30% planted)
        preset: String,
    },
}

fn stage_run(args: RunArgs, stage: Option<Stage>) -> diffprop::Result<()> {
    let manifest = ExperimentManifest::load(&args.manifest)?;
    let run = Run::open(manifest, args.seed, args.out, args.force)?;
    match stage {
        Some(s) => {
            let outcome = run.run_stage(s)?;
            log::info!("{}: {outcome:?}", s.name());
            Ok(())
        }
        None => run.run_all(),
    }
}

fn execute(cli: Cli) -> diffprop::Result<()> {
    match cli.command {
        Command::DatasetGen(a) => stage_run(a, Some(Stage::DatasetGen)),
        Command::Train(a) => stage_run(a, Some(Stage::Train)),
        Command::Sample(a) => stage_run(a, Some(Stage::Sample)),
        Command::Attack(a) => stage_run(a, Some(Stage::Attack)),
        Command::DefendFit(a) => stage_run(a, Some(Stage::DefendFit)),
        Command::DefendSample(a) => stage_run(a, Some(Stage::DefendSample)),
        Command::Eval(a) => stage_run(a, Some(Stage::Eval)),
        Command::Run(a) => stage_run(a, None),
        Command::Report { runs, out } => {
            let merged = merge_reports(&runs)?;
            write_atomic(&out.join("report.csv"), &merged.csv_bytes()?)?;
            write_atomic(&out.join("plots.json"), &merged.plots_json()?)?;
            Ok(())
        }
        Command::Init { preset } => {
            print!("{}", ExperimentManifest::preset(&preset)?.to_json());
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
