// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vitclust::knn::Weighting;
use vitclust::{NormSource, Scope, SelectionMode, Strategy};

#[derive(Parser, Debug)]
#[command(name = "vitclust", version, about = "ViT feature extraction with final-layer artifact attenuation, clustering and k-NN evaluation")]
pub struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write baseline and engineered feature caches plus a JSON sidecar.
    Extract {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        eng: EngineArgs,
        #[command(flatten)]
        theta: ThetaArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a labeled feature cache with the repeated K-Means protocol.
    Cluster {
        /// Feature cache(s) to evaluate.
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        /// Number of clusters (default: number of classes).
        #[arg(long)]
        k: Option<usize>,
        /// Also count points with negative silhouette under the true labels.
        #[arg(long)]
        breakaway: bool,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep θ and evaluate the engineered features at each value.
    Scan {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        eng: EngineArgs,
        #[arg(long, default_value_t = 1.0)]
        theta_min: f32,
        #[arg(long, default_value_t = 8.0)]
        theta_max: f32,
        #[arg(long, default_value_t = 0.5)]
        theta_step: f32,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weighted k-NN accuracy of a query cache against a labeled train cache.
    Knn {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.07)]
        temperature: f64,
        #[arg(long, value_enum, default_value_t = WeightingArg::ExpCosine)]
        weighting: WeightingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the token-norm histogram and the attention-value histogram.
    Histograms {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        eng: EngineArgs,
        #[command(flatten)]
        theta: ThetaArgs,
        #[arg(long, default_value_t = 512)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export head-averaged CLS attention maps before and after attenuation.
    Attnmap {
        #[command(flatten)]
        model: ModelArgs,
        /// An image file, or use --manifest with --index.
        #[arg(long, conflicts_with = "manifest")]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        eng: EngineArgs,
        #[command(flatten)]
        theta: ThetaArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Weight container (safetensors layout, F32).
    #[arg(long)]
    weights: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EngineArgs {
    #[arg(long, value_enum, default_value_t = SourceArg::Query)]
    source: SourceArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Minimum)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = ScopeArg::Cls)]
    scope: ScopeArg,
    /// Mask the attention diagonal before attenuation.
    #[arg(long)]
    lsa: bool,
    /// Which side of θ is attenuated (scan defaults to raw-low).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct ThetaArgs {
    #[arg(long)]
    theta: Option<f32>,
    /// Pick θ from the dataset norm histogram.
    #[arg(long)]
    theta_auto: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ProtocolArgs {
    #[arg(long, default_value_t = 20)]
    sets: usize,
    #[arg(long, default_value_t = 25)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SourceArg {
    Query,
    Key,
    Value,
    Output,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Minimum,
    Average,
    NegInf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScopeArg {
    Cls,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Minority,
    RawLow,
    RawHigh,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum WeightingArg {
    Uniform,
    ExpCosine,
}

impl From<SourceArg> for NormSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Query => NormSource::Query,
            SourceArg::Key => NormSource::Key,
            SourceArg::Value => NormSource::Value,
            SourceArg::Output => NormSource::Output,
        }
    }
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Minimum => Strategy::Minimum,
            StrategyArg::Average => Strategy::Average,
            StrategyArg::NegInf => Strategy::NegInf,
        }
    }
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Cls => Scope::Cls,
            ScopeArg::All => Scope::All,
        }
    }
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Minority => SelectionMode::Minority,
            ModeArg::RawLow => SelectionMode::RawLow,
            ModeArg::RawHigh => SelectionMode::RawHigh,
        }
    }
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::ExpCosine => Weighting::ExpCosine,
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!("--threads must be at least 1");
        }
        if !vitclust::par::set_threads(n) {
            log::warn!("--threads {n} ignored (no parallel support or pool already set)");
        }
    }
    let exec = if cli.sequential {
        vitclust::Execution::Sequential
    } else {
        vitclust::Execution::default()
    };
    commands::run(cli.command, exec)
}
