//! `mlmlab`: command-line driver for tokenization, label maps, pretraining,
//! fine-tuning, FLOPs estimates and result analysis.

mod commands;
mod settings;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mlmlab", version, about = "Masked character-prediction pretraining laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Byte-level BPE vocabularies.
    #[command(subcommand)]
    Tokenize(TokenizeCmd),
    /// Export the token-to-class map of an objective and print its class count.
    Labelmap {
        /// Vocabulary directory or external vocabulary file.
        #[arg(long)]
        vocab: PathBuf,
        /// mlm, firstchar29, lastchar29, first:N or last:N
        #[arg(long)]
        objective: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Pretrain an encoder under one objective.
    Pretrain {
        /// `key = value` settings file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a setting, e.g. `--set total_steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Fine-tune a pretrained checkpoint on a probe task over several seeds.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Training file (TSV).
        #[arg(long)]
        task: PathBuf,
        /// Evaluation file (TSV).
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_enum)]
        kind: TaskKindArg,
        /// Task name used in reports (default: training file stem).
        #[arg(long)]
        task_name: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Analytic training-FLOPs table.
    Flops {
        #[arg(long, value_enum, default_value = "paper")]
        preset: FlopsPresetArg,
        /// Objectives to tabulate (repeatable); default is the full table.
        #[arg(long)]
        objective: Vec<String>,
        /// Count classes on this vocabulary instead of the built-in reference counts.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Charge the head only at the masked fraction of positions.
        #[arg(long)]
        masked_head_only: bool,
        /// Include elementwise operations.
        #[arg(long)]
        elementwise: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation and cost-benefit reports from metric and FLOPs CSVs.
    Analyze {
        /// Directory searched recursively for metric and FLOPs CSV files.
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        family: FamilyArg,
        #[arg(long, value_enum, default_value = "all")]
        axis: AxisArg,
        /// Task to correlate; `avg` is the mean over tasks.
        #[arg(long, default_value = "avg")]
        task: String,
        /// Metric to use for every task (default: each task's headline metric).
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic corpora and probe tasks.
    #[command(subcommand)]
    Synth(SynthCmd),
}

#[derive(Subcommand)]
enum TokenizeCmd {
    /// Train a byte-level BPE vocabulary on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Class counts of the n-character objectives (CSV + SVG chart).
    Classes {
        #[arg(long)]
        vocab: PathBuf,
        /// `1..9` or a comma list such as `1,2,4`.
        #[arg(long, default_value = "1..9")]
        n: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Topic-structured synthetic corpus, one document per line.
    Corpus {
        #[arg(long, default_value_t = 4000)]
        docs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic probe task drawn from the same word inventory.
    Task {
        #[arg(long, value_enum)]
        kind: TaskKindArg,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Needed to place span answers in token coordinates.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKindArg {
    Classification,
    Span,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlopsPresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    First,
    Last,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    LogClasses,
    Classes,
    N,
    All,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
