use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Guided image captioning pipeline: synthesize corpora, build vocabularies,
/// train, sweep, decode, evaluate and report.
#[derive(Debug, Parser)]
#[command(name = "guidecap", version)]
pub struct Cli {
    /// Output directory. Defaults to $GUIDECAP_OUT/<command>, else runs/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// TOML file with optional [synth], [model], [train] and [decode] tables.
    /// Command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,

    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with train/dev/test splits and a test guide list.
    Synth(SynthArgs),
    /// Train a subword vocabulary on a tuple file.
    Vocab(VocabArgs),
    /// Train a captioning model and keep the best checkpoint on dev CIDEr.
    Train(TrainArgs),
    /// Train every cell of a learning-rate by decay-rate grid.
    Sweep(SweepArgs),
    /// Caption a tuple file (or a guide list) with a checkpoint or the copy baseline.
    Decode(DecodeArgs),
    /// Score one or more systems and write comparison tables.
    Eval(EvalArgs),
    /// Corpus statistics: counts, guide lengths, entropy and train/test overlap.
    Stats(StatsArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub guides_per_image: Option<usize>,
    #[arg(long)]
    pub n_objects: Option<usize>,
    #[arg(long)]
    pub n_attributes: Option<usize>,
    #[arg(long)]
    pub n_relations: Option<usize>,
    #[arg(long)]
    pub n_places: Option<usize>,
    #[arg(long)]
    pub noise: Option<f32>,
    /// Feature widths as `global,regional_gr,regional_frcnn,max_regions`.
    #[arg(long)]
    pub feature_dims: Option<String>,
    /// Train, dev and test fractions, comma separated.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Training tuple file (JSON lines).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Encoder inputs: T, G, T+G, T+G+R_GR, T+G+R_FRCNN or T+G+R_GR+R_FRCNN.
    #[arg(long)]
    pub ablation: Option<String>,
    /// `desk` (default) or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub fc_hidden: Option<usize>,
    #[arg(long)]
    pub max_caption_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f32>,
}

#[derive(Debug, Args, Clone)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    /// Steps between learning-rate decays; one epoch when unset.
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Learning rates, comma separated. Defaults to the published grid.
    #[arg(long)]
    pub lrs: Option<String>,
    /// Decay rates, comma separated. Defaults to the published grid.
    #[arg(long)]
    pub decays: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Tuple file supplying features and references.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `copy` decodes with the copy-the-guide baseline instead of a checkpoint.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Guide list (image id, then guides, tab separated); decodes every listed guide.
    #[arg(long)]
    pub guides: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `NAME=eval.jsonl`; repeat for each system to compare.
    #[arg(long = "system", required = true)]
    pub systems: Vec<String>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Guide list to compare against the training guides.
    #[arg(long)]
    pub test_guides: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}
