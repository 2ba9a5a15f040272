use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xbprune::config::PipelineConfig;
use xbprune::error::Result;
use xbprune::pipeline::{Run, Stage};

#[derive(Parser)]
#[command(name = "xbprune", version, about = "Prune, quantize and map small CNNs onto memristor crossbars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory holding checkpoints and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory read by the first stage instead of the one
    /// under --out.
    #[arg(long)]
    stage_input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline network.
    Train(Common),
    /// ADMM pruning followed by the hard mask and masked retraining.
    Prune(Common),
    /// Remove empty and redundant filters and channels.
    Purify(Common),
    /// Distillation quantization onto device levels.
    Quantize(Common),
    /// Map the quantized network onto crossbars.
    Map(Common),
    /// Simulate crossbar inference with non-idealities.
    Simulate(Common),
    /// Cost estimate and stage summary.
    Report(Common),
    /// Run several stages in order (all by default).
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stages, e.g. `purify,quantize,map`.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn run_stages(common: &Common, stages: &[Stage]) -> Result<()> {
    let (mut cfg, base) = match &common.config {
        Some(p) => (PipelineConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let mut run = Run::new(cfg, &common.out, &base)?;
    run.run(stages, common.stage_input.as_deref())?;
    println!("{}", serde_json::json!({ "ok": true, "out": common.out, "config_hash": run.config_hash() }));
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => run_stages(&c, &[Stage::Train]),
        Command::Prune(c) => run_stages(&c, &[Stage::Admm, Stage::Mask]),
        Command::Purify(c) => run_stages(&c, &[Stage::Purify]),
        Command::Quantize(c) => run_stages(&c, &[Stage::Quantize]),
        Command::Map(c) => run_stages(&c, &[Stage::Map]),
        Command::Simulate(c) => run_stages(&c, &[Stage::Simulate]),
        Command::Report(c) => run_stages(&c, &[Stage::Report]),
        Command::Pipeline { common, stages } => {
            let stages = match stages {
                Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<Stage>>>()?,
                None => Stage::ALL.to_vec(),
            };
            run_stages(&common, &stages)
        }
        Command::DefaultConfig => {
            let text = serde_json::to_string_pretty(&PipelineConfig::default())?;
            // a reader that hangs up early (`| head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": message, "kind": kind }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}
