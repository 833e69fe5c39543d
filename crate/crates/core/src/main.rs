use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clozeread::commands::{
    cmd_eval_spelling, cmd_gradcheck, cmd_pretrain_lm, cmd_render_demo, cmd_self_train, cmd_train, noise_preset, RunConfig,
};
use clozeread::{parallel, Error};

#[derive(Parser)]
#[command(version, about = "Cloze language modeling for toy text recognition")]
struct Cli {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the language model as a spelling corrector.
    PretrainLm,
    /// Train vision model, language model and fusion end to end.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score language-model checkpoints on a spelling benchmark.
    EvalSpelling,
    /// Fine-tune a trained pipeline with confident pseudo labels.
    SelfTrain,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Render a string and, given a pipeline checkpoint, its attention maps.
    RenderDemo {
        #[arg(long)]
        text: Option<String>,
        /// clean, moderate or heavy
        #[arg(long)]
        noise: Option<String>,
    },
}

fn run(cli: Cli) -> clozeread::Result<bool> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(n) => parallel::set_threads(n),
        None => parallel::set_threads(parallel::available_cores()),
    }
    match cli.command {
        Command::PretrainLm => cmd_pretrain_lm(&cfg).map(|_| true),
        Command::Train { resume } => cmd_train(&cfg, resume).map(|_| true),
        Command::EvalSpelling => cmd_eval_spelling(&cfg).map(|_| true),
        Command::SelfTrain => cmd_self_train(&cfg).map(|_| true),
        Command::Gradcheck { seeds } => {
            let results = cmd_gradcheck(seeds)?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} cases, {failed} failed", results.len());
            Ok(failed == 0)
        }
        Command::RenderDemo { text, noise } => {
            let noise = match noise {
                Some(name) => noise_preset(&name)?,
                None => cfg.render.noise,
            };
            let text = text.unwrap_or_else(|| cfg.render.text.clone());
            cmd_render_demo(&cfg, &text, &noise).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
