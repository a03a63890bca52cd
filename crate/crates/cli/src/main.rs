use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use visknow_cli::server::{serve, AppState};
use visknow_core::pipeline::{run_enabled, run_stage, PipelineConfig, Stage};
use visknow_core::Error;

#[derive(Parser)]
#[command(name = "visknow", version, about = "Build, review and benchmark a multi-modal animal knowledge base")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `kb_dir` from the configuration.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract triplets from the documents into a fresh KB.
    Extract(StageArgs),
    /// Detect, segment and verify part regions on category images.
    Annotate(StageArgs),
    /// Attach media, inherit parts, propose merges, ground relations.
    Align(StageArgs),
    /// Fold review decisions into the KB.
    Apply(StageArgs),
    /// Export the text link-prediction benchmark.
    ExportText(StageArgs),
    /// Export the part-segmentation benchmark.
    ExportPart(StageArgs),
    /// Build the knowledge-augmented VQA benchmark.
    BuildVqa(StageArgs),
    /// Train a knowledge-graph embedding on the text benchmark.
    TrainEmbed(StageArgs),
    /// Evaluate the trained embedding (MRR, HITS@k).
    EvalKgc(StageArgs),
    /// Score part-segmentation predictions against the benchmark.
    EvalSeg(StageArgs),
    /// Zero-shot classification with knowledge ensembles.
    Zsl(StageArgs),
    /// Run every enabled stage from extract to export-part.
    Run(StageArgs),
    /// Serve the review API.
    Serve {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Bearer token expected from clients.
        #[arg(long, env = "VISKNOW_REVIEW_TOKEN", hide_env_values = true)]
        token: String,
        /// Directory with the review UI bundle, served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn load(args: &StageArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(kb) = &args.kb {
        cfg.kb_dir = std::path::absolute(kb).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn run(cli: Cli) -> Result<(), Error> {
    let (stage, args) = match cli.command {
        Command::Serve { kb, addr, token, static_dir } => {
            let state = AppState::open(&kb, token)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::InvalidConfig(e.to_string()))?;
            return rt
                .block_on(serve(state, &addr, static_dir.as_deref()))
                .map_err(|e| Error::InvalidConfig(format!("cannot serve on {addr}: {e}")));
        }
        Command::Run(args) => {
            print(&run_enabled(&load(&args)?)?);
            return Ok(());
        }
        Command::Extract(a) => (Stage::Extract, a),
        Command::Annotate(a) => (Stage::Annotate, a),
        Command::Align(a) => (Stage::Align, a),
        Command::Apply(a) => (Stage::Apply, a),
        Command::ExportText(a) => (Stage::ExportText, a),
        Command::ExportPart(a) => (Stage::ExportPart, a),
        Command::BuildVqa(a) => (Stage::BuildVqa, a),
        Command::TrainEmbed(a) => (Stage::TrainEmbed, a),
        Command::EvalKgc(a) => (Stage::EvalKgc, a),
        Command::EvalSeg(a) => (Stage::EvalSeg, a),
        Command::Zsl(a) => (Stage::Zsl, a),
    };
    print(&run_stage(&load(&args)?, stage)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
