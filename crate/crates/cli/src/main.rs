// SPDX-License-Identifier: MIT OR Apache-2.0

//! `mechuq` command-line workbench.
//!
//! Exit status: 0 on success, 1 on a domain or I/O error, 2 on a usage error.

mod cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "mechuq",
    version,
    about = "Induction-head and attention-sink uncertainty workbench"
)]
struct Cli {
    /// Seed for every random choice; falls back to MECHUQ_SEED, then 42.
    #[arg(long, global = true, env = "MECHUQ_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a toy model with hand-wired circuits.
    Toy(ToyArgs),
    /// Rank attention heads by induction score.
    DetectHeads(DetectHeadsArgs),
    /// Rank final-block neurons by LogitVar.
    DetectNeurons(DetectNeuronsArgs),
    /// Compute mean head outputs and neuron pre-activations over a reference corpus.
    Means(MeansArgs),
    /// Generate a response with full captures.
    Generate(GenerateArgs),
    /// Generate a labelled grounded/hallucinated corpus.
    Synth(SynthArgs),
    /// Score traces with gated or baseline uncertainty methods.
    Score(ScoreArgs),
    /// Compare a trace's response under an intervention.
    Ablate(AblateArgs),
    /// Analyses over a trace corpus.
    #[command(subcommand)]
    Study(Study),
    /// Multi-seed split evaluation of a score table.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKind {
    Induction,
    Composite,
    EntropyNeuron,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, value_enum, default_value = "induction")]
    kind: ToyKind,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Output model manifest; the tensor blob is written next to it.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the wired head and neuron indices as JSON.
    #[arg(long)]
    info: Option<PathBuf>,
}

#[derive(Args)]
struct DetectHeadsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Half-length of the repeated probe sequence.
    #[arg(long = "L", default_value_t = 16)]
    l: usize,
    #[arg(long, default_value_t = 16)]
    trials: usize,
    /// Keep only the best k heads in the output.
    #[arg(long)]
    top_k: Option<usize>,
    /// Prepend this token to every probe.
    #[arg(long)]
    bos: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct DetectNeuronsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct MeansArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of trace files whose token sequences form the reference corpus.
    #[arg(long)]
    reference: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prompt: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    max_new: usize,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value = "trace")]
    id: String,
    /// Attach a label to the trace.
    #[arg(long)]
    label: Option<u8>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 200)]
    grounded: usize,
    #[arg(long, default_value_t = 200)]
    hallucinated: usize,
    #[arg(long, default_value_t = 24)]
    context_length: usize,
    #[arg(long, default_value_t = 6)]
    response_length: usize,
    /// Output directory, one trace file per item.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    heads: PathBuf,
    /// Method names, comma-separated or repeated.
    #[arg(long, value_delimiter = ',', default_value = "intrygue-minmax")]
    method: Vec<String>,
    /// Number of top induction heads used by head-based methods.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Mean bank from `means`; required when ablating.
    #[arg(long)]
    means: Option<PathBuf>,
    /// Heads to mean-ablate, e.g. L1H0.
    #[arg(long, value_delimiter = ',')]
    heads: Vec<String>,
    /// Final-block neurons to mean-ablate.
    #[arg(long, value_delimiter = ',')]
    neurons: Vec<usize>,
    /// Scale a final-block pre-activation, as NEURON:FACTOR.
    #[arg(long, value_delimiter = ',')]
    boost: Vec<String>,
    /// Report the L2 change of these neurons' pre-activations.
    #[arg(long, value_delimiter = ',')]
    track_neurons: Vec<usize>,
    #[arg(long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    heads: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Number of split seeds.
    #[arg(long, default_value_t = 5)]
    splits: usize,
    /// First split seed; the others follow consecutively.
    #[arg(long, default_value_t = 42)]
    seed0: u64,
    /// Train/validation/test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.4,0.2")]
    fractions: Vec<f64>,
}

#[derive(Subcommand)]
enum Study {
    /// AUROC and U test of the aggregated top-k sink rate against labels.
    SinkVsLabel {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Spearman correlation between sink rate and entropy-neuron activation.
    HeadNeuronCorr {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        /// Neuron ranking from `detect-neurons`.
        #[arg(long)]
        neurons: PathBuf,
        /// Number of ranked neurons to study.
        #[arg(long, default_value_t = 1)]
        top_n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Every gating transform crossed with mean and min sink aggregation.
    GatingSweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Gated-score AUROC across k, plus the validation choice of k.
    KSweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        ks: Vec<usize>,
        /// Gated preset: intrygue-mean or intrygue-minmax.
        #[arg(long, default_value = "intrygue-mean")]
        preset: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Joint test-set predictions of two thresholded methods.
    Quadrant {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value = "ln_entropy")]
        a: String,
        #[arg(long, default_value = "sink-mean")]
        b: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
