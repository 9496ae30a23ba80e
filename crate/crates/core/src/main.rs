mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "gmparse", version, about = "Fingerprint estimation and model parsing for generative models")]
struct Cli {
    /// Worker threads for zoo specs, folds and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Toy generator zoo.
    #[command(subcommand)]
    Zoo(ZooCmd),
    /// Parsing network training and evaluation.
    #[command(subcommand)]
    Parse(ParseCmd),
    /// Fingerprint export.
    #[command(subcommand)]
    Fingerprint(FingerprintCmd),
    /// Baselines.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Cosine similarity of fingerprints within and across GMs.
    Similarity(SimilarityArgs),
    /// Genuine-vs-fake detection.
    #[command(subcommand)]
    Deepfake(DeepfakeCmd),
    /// Closed-set image attribution.
    #[command(subcommand)]
    Attribute(AttributeCmd),
    /// Occlusion heatmap for one parsed parameter.
    Heatmap(HeatmapArgs),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(GradcheckArgs),
    /// Re-run a command from a saved config.json.
    Replay(ReplayArgs),
}

#[derive(Subcommand, Debug)]
enum ZooCmd {
    /// Train the zoo and sample every GM's images
    Build(ZooBuildArgs),
}

#[derive(Subcommand, Debug)]
enum ParseCmd {
    /// Train on every fold and evaluate against the baselines
    Train(ParseTrainArgs),
    /// Re-evaluate a parse run, or parse individual images
    Eval(ParseEvalArgs),
}

#[derive(Subcommand, Debug)]
enum FingerprintCmd {
    /// Write fingerprints as raw f32 with a JSON sidecar
    Extract(ExtractArgs),
}

#[derive(Subcommand, Debug)]
enum BaselineCmd {
    /// Train on shuffled ground truth (repeated)
    RandomGt(RandomGtArgs),
}

#[derive(Subcommand, Debug)]
enum DeepfakeCmd {
    /// Train a detector on seen GMs and score unseen ones
    Train(DeepfakeTrainArgs),
    /// Score images or the held-out set with a trained detector
    Eval(AppEvalArgs),
}

#[derive(Subcommand, Debug)]
enum AttributeCmd {
    /// Train a classifier over genuine plus the chosen GMs
    Train(AttributeTrainArgs),
    /// Score images or the held-out set with a trained attributor
    Eval(AppEvalArgs),
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A config.json written by an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let jobs = cli.jobs.max(1);
    let config = match cli.command {
        Command::Zoo(ZooCmd::Build(a)) => a.resolve()?,
        Command::Parse(ParseCmd::Train(a)) => a.resolve()?,
        Command::Parse(ParseCmd::Eval(a)) => a.resolve()?,
        Command::Fingerprint(FingerprintCmd::Extract(a)) => a.resolve()?,
        Command::Baseline(BaselineCmd::RandomGt(a)) => a.resolve()?,
        Command::Similarity(a) => a.resolve()?,
        Command::Deepfake(DeepfakeCmd::Train(a)) => a.resolve()?,
        Command::Deepfake(DeepfakeCmd::Eval(a)) => a.resolve(AppKind::Deepfake)?,
        Command::Attribute(AttributeCmd::Train(a)) => a.resolve()?,
        Command::Attribute(AttributeCmd::Eval(a)) => a.resolve(AppKind::Attribution)?,
        Command::Heatmap(a) => a.resolve()?,
        Command::Gradcheck(a) => a.resolve()?,
        Command::Replay(a) => RunConfig::replay(&a.config, a.out)?,
    };
    execute(&config, jobs)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
