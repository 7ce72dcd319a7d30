use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pointer_gpt::cli::{
    cmd_compare, cmd_evaluate, cmd_summarize, cmd_train, copy_task, write_dataset, CommandError, CompareArgs,
    EvaluateArgs, SummarizeArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "pointer-gpt", version, about = "Train and run a pointer-generator GPT summarizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.ckpt, vocab.txt and loss.log to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config (JSON with model/train/vocab/decode sections).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Falls back to POINTER_GPT_SEED, then the config's train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train the vocabulary-only baseline (p_gen fixed at 1).
        #[arg(long)]
        baseline: bool,
    },
    /// Summarize one source text.
    Summarize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// File holding the source text, or `-` for stdin.
        #[arg(long)]
        input: PathBuf,
        /// Beam width; greedy when omitted or 1.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Decode every record of a dataset and print ROUGE-1/2.
    Evaluate {
        #[arg(long, required_unless_present = "self_test")]
        ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "self_test")]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Score the references against themselves.
        #[arg(long)]
        self_test: bool,
        /// Decode threads (0 = all cores).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train the baseline and the pointer model on an 80/20 split and
    /// print both ROUGE tables.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Decode threads (0 = all cores).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Write the synthetic copy-task dataset as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_input(path: &Path) -> std::io::Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path)
    }
}

fn run(command: Command) -> Result<(), CommandError> {
    match command {
        Command::Train {
            data,
            out,
            config,
            seed,
            baseline,
        } => {
            let o = cmd_train(&TrainArgs {
                data,
                out,
                config,
                seed,
                baseline,
            })?;
            println!("trained {} steps, final loss {:.6}", o.steps, o.final_loss);
            println!("checkpoint {}", o.checkpoint.display());
            println!("vocab {}", o.vocab.display());
            println!("loss log {}", o.loss_log.display());
        }
        Command::Summarize {
            ckpt,
            vocab,
            input,
            beam,
            max_len,
        } => {
            let source = read_input(&input)?;
            let summary = cmd_summarize(
                &SummarizeArgs {
                    ckpt,
                    vocab,
                    beam,
                    max_len,
                },
                &source,
            )?;
            println!("{summary}");
        }
        Command::Evaluate {
            ckpt,
            vocab,
            data,
            beam,
            max_len,
            self_test,
            workers,
        } => {
            let e = cmd_evaluate(&EvaluateArgs {
                ckpt: ckpt.unwrap_or_default(),
                vocab: vocab.unwrap_or_default(),
                data,
                beam,
                max_len,
                self_test,
                workers,
            })?;
            print!("{}", e.table());
        }
        Command::Compare {
            data,
            config,
            seed,
            workers,
        } => {
            let c = cmd_compare(&CompareArgs {
                data,
                config,
                seed,
                workers,
            })?;
            eprintln!("train {} records, held out {}", c.train_size, c.test_size);
            print!("{}", c.table());
        }
        Command::Synth { out, records, seed } => {
            let corpus = copy_task(records, seed);
            write_dataset(&out, &corpus.records)?;
            println!("wrote {} records to {}", corpus.records.len(), out.display());
            println!("vocab max_size {}", corpus.vocab_max_size);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
