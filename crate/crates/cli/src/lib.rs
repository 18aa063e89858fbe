//! Command-line surface of the fingerprint pipeline.
//!
//! One binary, eight subcommands covering the full flow: `embed` images
//! into a feature space, `fingerprint` a generated set against a reference
//! manifold, `attribute` samples to their source, `eval` trained models
//! (including cross-scenario transfer), `metrics` for separability and
//! alignment scores, `synth` for seeded benchmark scenarios, `dump` for
//! raw artifact tensors, and `verify` for re-checking recorded hashes.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 validation, 5 numerical
//! failure. Parallelism comes from a global worker pool sized by
//! `--threads` (which overrides the `FPT_THREADS` environment variable);
//! results are bit-identical across thread counts.

pub mod cmd;
pub mod dataio;
pub mod report;
pub mod runfile;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dataio::FeatureRoute;

#[derive(Parser)]
#[command(
    name = "fpt",
    version,
    about = "Manifold-residual fingerprints for generative samplers"
)]
pub struct Cli {
    /// Worker threads (overrides FPT_THREADS; default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Embed PNG images (or re-label an existing tensor) into a feature space.
    Embed(EmbedArgs),
    /// Project a generated set onto a reference manifold and store the residuals.
    Fingerprint(FingerprintArgs),
    /// Train a source-attribution classifier.
    Attribute(AttributeArgs),
    /// Evaluate a trained classifier on a dataset split or across scenarios.
    Eval(EvalArgs),
    /// Separability and alignment metrics over stored tensors.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Build a seeded synthetic benchmark scenario.
    Synth(SynthArgs),
    /// Dump a stored fingerprint as CSV.
    Dump(DumpArgs),
    /// Re-check every file hash recorded in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    /// Pixel values, channel-planar, scaled to [0, 1].
    Rgb,
    /// Log-magnitude centered 2-D spectrum per channel.
    Freq,
    /// Pass through an existing feature tensor.
    External,
}

#[derive(Args)]
pub struct EmbedArgs {
    /// PNG files, directories of PNGs, or one .fpte file for --space external.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Feature space to embed into.
    #[arg(long, value_enum)]
    pub space: SpaceArg,
    /// Standardize each dimension to zero mean, unit variance (fit on this set).
    #[arg(long)]
    pub standardize: bool,
    /// Source label recorded in the output manifest (default: output file stem).
    #[arg(long)]
    pub label: Option<String>,
    /// Output tensor path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FingerprintArgs {
    /// Reference (real) embedding tensor.
    #[arg(long)]
    pub real: PathBuf,
    /// Generated embedding tensor.
    #[arg(long = "gen")]
    pub generated: PathBuf,
    /// Radius for the support-coverage summary.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Swap roles: project the real samples onto the generated set.
    #[arg(long)]
    pub swap: bool,
    /// Nearest-neighbor scan block size.
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Output fingerprint path (sidecar manifests go next to it).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AttributeArgs {
    /// Scenario directory produced by `fpt synth`.
    #[arg(long, conflicts_with = "train_dir")]
    pub scenario: Option<PathBuf>,
    /// Directory of per-class .fpte feature files.
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    /// JSON file with any of: features, arch, seed, epochs, lr, batch, momentum. Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Feature route for --scenario (default: artifact).
    #[arg(long, value_enum)]
    pub features: Option<FeatureRoute>,
    /// Classifier architecture: "linear" or "mlp:<width>" (default: mlp:256).
    #[arg(long)]
    pub arch: Option<String>,
    /// Split and training seed (default: 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs (default: 100).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (default: 1e-3).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size (default: 64).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Momentum coefficient (default: 0.9).
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Model checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model checkpoint written by `fpt attribute`.
    #[arg(long)]
    pub model: PathBuf,
    /// Scenario directory to evaluate on.
    #[arg(long, conflicts_with = "data_dir")]
    pub scenario: Option<PathBuf>,
    /// Directory of per-class .fpte feature files to evaluate on.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Feature route for --scenario (default: artifact).
    #[arg(long, value_enum)]
    pub features: Option<FeatureRoute>,
    /// Dataset split to evaluate (default: test).
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Cross-scenario evaluation on the Test split (requires --map).
    #[arg(long, requires = "map")]
    pub cross: bool,
    /// JSON label map {"data class": "model class"} for --cross.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Dataset split seed (default: the model's training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum MetricsCommand {
    /// Separability: inter-class over intra-class Frechet distance.
    Fdr(FdrArgs),
    /// Normalized mutual information between two label files.
    Nmi(NmiArgs),
    /// kNN support precision and recall of a generated set against a real set.
    Pr(PrArgs),
    /// NMI between a k-means clustering of features and reference labels.
    ClusterAlign(ClusterAlignArgs),
    /// Frechet distance between the Gaussian summaries of two tensors.
    Fd(FdArgs),
}

#[derive(Args)]
pub struct FdrArgs {
    /// Feature tensor; rows align with the label file.
    #[arg(long)]
    pub features: PathBuf,
    /// Label file, one class label per row.
    #[arg(long)]
    pub labels: PathBuf,
    /// Seed of the intra-class halving shuffle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct NmiArgs {
    /// First label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Second label file.
    #[arg(long)]
    pub labels_b: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PrArgs {
    /// Real feature tensor.
    #[arg(long)]
    pub real: PathBuf,
    /// Generated feature tensor.
    #[arg(long = "gen")]
    pub generated: PathBuf,
    /// Neighborhood size of the support estimate.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ClusterAlignArgs {
    /// Feature tensor to cluster.
    #[arg(long)]
    pub features: PathBuf,
    /// Reference labels, one per row; k is their class count.
    #[arg(long)]
    pub labels: PathBuf,
    /// k-means seeding stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FdArgs {
    /// First feature tensor.
    #[arg(long)]
    pub features: PathBuf,
    /// Second feature tensor.
    #[arg(long)]
    pub features_b: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CanonicalArg {
    /// Unit circle with radial noise in the plane.
    Circle,
    /// Swiss roll projected onto the plane.
    Swiss,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Scenario config JSON.
    #[arg(long, conflicts_with_all = ["canonical", "seed"])]
    pub config: Option<PathBuf>,
    /// Built-in scenario family.
    #[arg(long, value_enum)]
    pub canonical: Option<CanonicalArg>,
    /// Scenario seed for --canonical (default: 0).
    #[arg(long, requires = "canonical")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpFormat {
    Csv,
}

#[derive(Args)]
pub struct DumpArgs {
    /// Fingerprint path as given to `fpt fingerprint --out`.
    #[arg(long)]
    pub fingerprint: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value_t = DumpFormat::Csv)]
    pub format: DumpFormat,
    /// Output file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Run manifest produced by a previous command.
    #[arg(long)]
    pub manifest: PathBuf,
}
