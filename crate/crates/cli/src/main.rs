//! `ghost`: generate data, build shadow maps, obfuscate, train, attack and
//! evaluate from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ghost", version, about = "Shadow-token obfuscation against gradient inversion")]
pub struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, global = true, env = "GHOST_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus: embeddings, vocabulary, lemmas, train and test splits.
    Gen(GenArgs),
    /// Build a shadow map from an embedding table.
    Search(SearchArgs),
    /// Replace every token of a dataset by a selected shadow token.
    Obfuscate(ObfuscateArgs),
    /// Fine-tune with FedSGD under a defense and evaluate.
    Train(TrainArgs),
    /// Run a token-recovery attack and score it against the originals.
    Attack(AttackArgs),
    /// Heuristic and selection-mode ablation grid as one CSV.
    Ablate(AblateArgs),
    /// Loss and gradient deviations between original and obfuscated data.
    Theory(TheoryArgs),
    /// ROUGE and METEOR-lite between two text fields of a JSONL file.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub n_classes: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Overlap {
    Absolute,
    ChanceCorrected,
}

#[derive(Args, Debug, Default)]
pub struct SearchFlags {
    #[arg(long)]
    pub k0: Option<usize>,
    #[arg(long)]
    pub tau_o: Option<f64>,
    #[arg(long, value_enum)]
    pub overlap: Option<Overlap>,
    /// Disable the shared-neighbor (indirect) filter.
    #[arg(long)]
    pub no_indirect: bool,
    /// Disable the mutual-neighbor (direct) filter.
    #[arg(long)]
    pub no_direct: bool,
    /// Disable the common-lemma filter.
    #[arg(long)]
    pub no_lemma: bool,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub lemmas: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchFlags,
    /// Shadow map JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Optimized,
    Random,
    Nearest,
}

#[derive(Args, Debug, Default)]
pub struct SelectFlags {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub tau_d: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Count the embedding layer in the hidden-state objective.
    #[arg(long)]
    pub include_embedding_layer: bool,
}

#[derive(Args, Debug)]
pub struct ObfuscateArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Reference model checkpoint; a seeded model is built when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub select: SelectFlags,
    /// Obfuscated dataset JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DefenseKind {
    None,
    Noise,
    Prune,
    Ghost,
}

#[derive(Args, Debug)]
pub struct DefenseFlags {
    #[arg(long, value_enum, default_value = "none")]
    pub defense: DefenseKind,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.99)]
    pub ratio: f64,
    /// Shadow map, required by the ghost defense.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Initial checkpoint; a seeded model is built when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub defense: DefenseFlags,
    #[command(flatten)]
    pub select: SelectFlags,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Write every shared gradient to this round archive.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackKind {
    Leakage,
    Matching,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Sampling,
    Max,
    Median,
    Mean,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub kind: AttackKind,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Original sentences, used as attack targets and for scoring.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub defense: DefenseFlags,
    /// Attack rounds from an archive instead of simulating them.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Obfuscated dataset JSONL for the adaptive attack.
    #[arg(long)]
    pub obfuscated: Option<PathBuf>,
    /// Adaptive strategy; all four when absent.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Attack report JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineInputs {
    /// Use these files instead of the synthetic corpus.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub lemmas: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: PipelineInputs,
    #[command(flatten)]
    pub search: SearchFlags,
    /// Sentences obfuscated per grid cell.
    #[arg(long)]
    pub sentences: Option<usize>,
    /// Ablation CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    #[command(flatten)]
    pub inputs: PipelineInputs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// JSONL file holding one text pair per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "obf_text")]
    pub candidate_field: String,
    #[arg(long, default_value = "text")]
    pub reference_field: String,
    #[arg(long)]
    pub lemmas: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
