//! `stfx`: synthesize data, train, decode, benchmark, and score the
//! streaming recognizer from the command line.

mod commands;
mod config;
mod formats;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use stfx_core::decoding::DecodeConfig;

#[derive(Parser)]
#[command(name = "stfx", version, about = "streaming transformer recognizer")]
struct Cli {
    /// Seed for anything stochastic; falls back to $STFX_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset of feature files plus transcripts.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        utts: usize,
        /// 0 = uniform tokens; 1 = cyclic-successor grammar.
        #[arg(long, default_value_t = 0)]
        grammar: usize,
    },
    /// Train from a TOML run description and write a checkpoint.
    Train { config: PathBuf },
    /// Decode one feature file or a directory of them.
    Decode {
        checkpoint: PathBuf,
        features: PathBuf,
        /// Interleave search with chunk arrival instead of encoding fully
        /// first; output is identical either way.
        #[arg(long, conflicts_with = "offline")]
        stream: bool,
        /// Encode the whole utterance before searching (the default).
        #[arg(long)]
        offline: bool,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.3)]
        gamma: f64,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 15)]
        prune: usize,
        /// Optional n-gram model file; without it the LM term is zero.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Also write the result records to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write hypotheses as a transcript file for `cer`.
        #[arg(long)]
        hyp: Option<PathBuf>,
    },
    /// Time the encoder per chunk, with and without state reuse.
    Bench {
        checkpoint: PathBuf,
        features: PathBuf,
        #[arg(long, default_value = "both", value_parser = ["isolated", "reuse", "both"])]
        mode: String,
        #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(20..))]
        reps: u64,
    },
    /// Micro-averaged character error rate between two transcript files.
    Cer { hyp: PathBuf, reference: PathBuf },
    /// Train the n-gram language model used by `decode --lm`.
    LmTrain {
        transcripts: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.5)]
        k: f64,
    },
}

fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("STFX_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| anyhow::anyhow!("STFX_SEED is not an integer: {v:?}")),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = resolve_seed(cli.seed)?;
    match cli.cmd {
        Cmd::Synth {
            out_dir,
            utts,
            grammar,
        } => commands::cmd_synth(&out_dir, seed, utts, grammar),
        Cmd::Train { config } => commands::cmd_train(&config),
        Cmd::Decode {
            checkpoint,
            features,
            stream,
            offline: _,
            lambda,
            gamma,
            beam,
            prune,
            lm,
            out,
            hyp,
        } => {
            let cfg = DecodeConfig {
                lambda,
                gamma,
                beam,
                prune,
                max_len: None,
            };
            commands::cmd_decode(
                &checkpoint,
                &features,
                stream,
                &cfg,
                lm.as_deref(),
                out.as_deref(),
                hyp.as_deref(),
            )
        }
        Cmd::Bench {
            checkpoint,
            features,
            mode,
            reps,
        } => commands::cmd_bench(&checkpoint, &features, &mode, reps as usize),
        Cmd::Cer { hyp, reference } => commands::cmd_cer(&hyp, &reference),
        Cmd::LmTrain {
            transcripts,
            out,
            order,
            k,
        } => commands::cmd_lm_train(&transcripts, &out, order, k),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
