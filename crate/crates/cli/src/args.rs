use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ssdml::baselines::{LrmlConfig, SeraphConfig};
use ssdml::data::BlobConfig;
use ssdml::trainer::{Method, TrainConfig};

fn defaults() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Debug, Parser)]
#[command(name = "ssdml", version, about = "Graph-based semi-supervised metric learning")]
pub struct Cli {
    /// Worker threads for the data-parallel kernels; 1 keeps runs reproducible
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write it to --model; history goes to stdout or --out as JSON lines
    Train(TrainArgs),
    /// Score a saved model on the labeled rows of a dataset (one JSON line)
    Eval(EvalArgs),
    /// Propagate seed affinities over a kNN graph and dump the symmetric result as CSV
    Propagate(GraphArgs),
    /// Mine triplets from propagated affinities and dump them as CSV
    Mine(GraphArgs),
    /// Write a synthetic Gaussian blob dataset as CSV
    Blobs(BlobArgs),
    /// Compare every analytic gradient with central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV input with feature columns and an optional label column
    #[arg(long, conflicts_with_all = ["images_idx", "labels_idx"])]
    pub data: Option<PathBuf>,

    /// IDX image file (used together with --labels-idx)
    #[arg(long, requires = "labels_idx")]
    pub images_idx: Option<PathBuf>,

    /// IDX label file (used together with --images-idx)
    #[arg(long, requires = "images_idx")]
    pub labels_idx: Option<PathBuf>,

    /// Name of the CSV label column
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Where to write the trained model
    #[arg(long, default_value = "model.ssdml")]
    pub model: PathBuf,

    /// Write the training history here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Training method: ours, seraph or lrml
    #[arg(long, default_value_t = defaults().method)]
    pub method: Method,

    /// Propagation coefficient
    #[arg(long, default_value_t = defaults().gamma)]
    pub gamma: f64,

    /// Neighbors per node (even)
    #[arg(long, default_value_t = defaults().k)]
    pub k: usize,

    /// Angular loss angle in degrees
    #[arg(long, default_value_t = defaults().alpha_deg)]
    pub alpha_deg: f64,

    /// Columns of the learned projection
    #[arg(long, default_value_t = defaults().embed_dim)]
    pub embed_dim: usize,

    /// Encoder learning rate
    #[arg(long, default_value_t = defaults().lr)]
    pub lr: f64,

    #[arg(long, default_value_t = defaults().batch_triplets)]
    pub batch_triplets: usize,

    /// Unlabeled rows per partition; 0 uses all of them
    #[arg(long, default_value_t = defaults().partition_size)]
    pub partition_size: usize,

    #[arg(long, default_value_t = defaults().epochs_per_partition)]
    pub epochs_per_partition: usize,

    #[arg(long, default_value_t = defaults().max_epochs)]
    pub max_epochs: usize,

    /// Metric solver iterations per batch
    #[arg(long, default_value_t = defaults().inner_l_iters)]
    pub inner_l_iters: usize,

    /// First trial step of each metric solve
    #[arg(long, default_value_t = defaults().step0)]
    pub step0: f64,

    #[arg(long, default_value_t = defaults().seed)]
    pub seed: u64,

    /// Share of labeled rows per class held out for model selection
    #[arg(long, default_value_t = defaults().val_fraction)]
    pub val_fraction: f64,

    /// Keep at most this many training labels per class [default: all]
    #[arg(long)]
    pub labeled_per_class: Option<usize>,

    /// Keep L orthonormal [default: on]
    #[arg(long, overrides_with = "no_orth")]
    pub orth: bool,

    /// Optimize L without the orthonormality constraint
    #[arg(long, overrides_with = "orth")]
    pub no_orth: bool,

    /// Train the feature encoder [default: on]
    #[arg(long, overrides_with = "no_encoder")]
    pub encoder: bool,

    /// Use raw features with a fixed identity map
    #[arg(long, overrides_with = "encoder")]
    pub no_encoder: bool,

    /// SERAPH decision threshold
    #[arg(long, default_value_t = SeraphConfig::default().eta)]
    pub eta: f64,

    /// SERAPH entropy weight
    #[arg(long, default_value_t = SeraphConfig::default().mu)]
    pub mu: f64,

    /// SERAPH trace weight
    #[arg(long, default_value_t = SeraphConfig::default().lambda)]
    pub lambda: f64,

    /// LRML similar-pair weight
    #[arg(long, default_value_t = LrmlConfig::default().gamma_s)]
    pub gamma_s: f64,

    /// LRML dissimilar-pair weight
    #[arg(long, default_value_t = LrmlConfig::default().gamma_d)]
    pub gamma_d: f64,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let base = defaults();
        TrainConfig {
            method: self.method,
            gamma: self.gamma,
            k: self.k,
            alpha_deg: self.alpha_deg,
            embed_dim: self.embed_dim,
            encoder: if self.no_encoder { false } else { base.encoder },
            orth: if self.no_orth { false } else { base.orth },
            lr: self.lr,
            batch_triplets: self.batch_triplets,
            partition_size: self.partition_size,
            epochs_per_partition: self.epochs_per_partition,
            max_epochs: self.max_epochs,
            inner_l_iters: self.inner_l_iters,
            step0: self.step0,
            seed: self.seed,
            val_fraction: self.val_fraction,
            labeled_per_class: self.labeled_per_class,
            seraph: SeraphConfig {
                eta: self.eta,
                mu: self.mu,
                lambda: self.lambda,
            },
            lrml: LrmlConfig {
                gamma_s: self.gamma_s,
                gamma_d: self.gamma_d,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Model file written by `train`
    #[arg(long)]
    pub model: PathBuf,

    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Comma-separated K values for Recall@K
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub recall_ks: Vec<usize>,

    /// Seed for the k-means restarts
    #[arg(long, default_value_t = defaults().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Write CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Neighbors per node (even for `mine`)
    #[arg(long, default_value_t = defaults().k)]
    pub k: usize,

    /// Propagation coefficient
    #[arg(long, default_value_t = defaults().gamma)]
    pub gamma: f64,

    /// Keep at most this many labels per class [default: all]
    #[arg(long)]
    pub labeled_per_class: Option<usize>,

    /// Seed for choosing which labels to keep
    #[arg(long, default_value_t = defaults().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BlobArgs {
    #[arg(long, default_value_t = BlobConfig::default().n_classes)]
    pub classes: usize,

    #[arg(long, default_value_t = BlobConfig::default().per_class)]
    pub per_class: usize,

    /// Dimensions carrying class information
    #[arg(long, default_value_t = BlobConfig::default().d_signal)]
    pub signal_dims: usize,

    /// Class-independent Gaussian dimensions
    #[arg(long, default_value_t = BlobConfig::default().d_noise)]
    pub noise_dims: usize,

    /// Distance of class means from the origin
    #[arg(long, default_value_t = BlobConfig::default().signal_sep)]
    pub sep: f64,

    /// Standard deviation of the noise dimensions
    #[arg(long, default_value_t = BlobConfig::default().noise_sigma)]
    pub noise_sigma: f64,

    #[arg(long, default_value_t = BlobConfig::default().seed)]
    pub seed: u64,

    /// Write CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BlobArgs {
    pub fn config(&self) -> BlobConfig {
        BlobConfig {
            n_classes: self.classes,
            per_class: self.per_class,
            d_signal: self.signal_dims,
            d_noise: self.noise_dims,
            signal_sep: self.sep,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Random problems per suite
    #[arg(long, default_value_t = 100)]
    pub instances: usize,

    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}
