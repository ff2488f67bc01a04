//! Command-line surface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msr_core::model::{Ablation, ModelConfig};
use msr_core::optim::AdamConfig;
use msr_core::train::TrainConfig;
use serde::Serialize;

use crate::checkpoint::Branch;
use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "msr", version, about = "Matching success rate models: data, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic six-city benchmark
    GenData(GenDataArgs),
    /// Train a multi-view model (or a solo student) on one city
    TrainMv(TrainMvArgs),
    /// Write a trained city's memory matrix to `<ckpt>/<city>.mem`
    ExportMemory(ExportArgs),
    /// Train a teacher/student pair on a target city
    TrainKd(TrainKdArgs),
    /// Score a checkpoint on a data split
    Eval(EvalArgs),
    /// Timing benchmarks
    Bench(BenchArgs),
    /// Answer newline-delimited JSON requests
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200_000)]
    pub source_rows: usize,
    #[arg(long, default_value_t = 5_000)]
    pub target_rows: usize,
    /// Divergence of each city's label process from the shared one
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    #[arg(long, default_value_t = 8)]
    pub ctx_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateTag {
    S1,
    S2,
    S3,
    S4,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    /// Controller width; defaults to the embedding size
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub mem_rows: usize,
    #[arg(long, default_value_t = 16)]
    pub mem_cols: usize,
    #[arg(long, default_value_t = 2)]
    pub read_heads: usize,
    /// Context slots per row; must match the data when given
    #[arg(long)]
    pub ctx_len: Option<usize>,
    #[arg(long, value_enum)]
    pub ablate: Option<AblateTag>,
}

impl ModelArgs {
    /// The model configuration for data whose rows carry `data_ctx` slots.
    pub fn config(&self, data_ctx: usize) -> Result<ModelConfig, Error> {
        if let Some(c) = self.ctx_len {
            if c != data_ctx {
                return Err(Error::Usage(format!(
                    "--ctx-len {c} does not match the data's {data_ctx} context slots"
                )));
            }
        }
        let ablation = match self.ablate {
            None => Ablation::default(),
            Some(t) => Ablation::parse(&format!("{t:?}")).expect("known tag"),
        };
        let config = ModelConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden.unwrap_or(self.embed_dim),
            mem_rows: self.mem_rows,
            mem_cols: self.mem_cols,
            read_heads: self.read_heads,
            ctx_len: data_ctx,
            ablation,
            ..ModelConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

impl FitArgs {
    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        let cfg = TrainConfig {
            batch: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        };
        cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("--lr must be a finite non-negative number, got {}", self.lr)));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainKind {
    Mv,
    Student,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainMvArgs {
    #[arg(long)]
    pub city: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// `student` trains the memory-free network on its own
    #[arg(long, value_enum, default_value_t = TrainKind::Mv)]
    pub model: TrainKind,
    /// Train over the embedding-size and memory-rows grid instead of one model
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub city: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainKdArgs {
    #[arg(long)]
    pub city: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Source cities whose `.mem` files form the bank; defaults to every
    /// memory file in the checkpoint directory except the target's
    #[arg(long, value_delimiter = ',')]
    pub sources: Vec<String>,
    /// Epochs of plain multi-view training that initialise the target memory
    #[arg(long, default_value_t = 1)]
    pub pretrain_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Model directory holding `model.ckpt`
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long, value_enum)]
    pub model: Option<Branch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchKind {
    TrainScaling,
    InferLatency,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub kind: BenchKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub city: String,
    /// Distillation model directory (infer-latency)
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Base training size for train-scaling; defaults to half the training split
    #[arg(long)]
    pub rows: Option<usize>,
    /// Timed epochs per size (train-scaling)
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Requests per model (infer-latency)
    #[arg(long, default_value_t = 10_000)]
    pub requests: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model_args: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    /// Model directory holding `model.ckpt`
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<Branch>,
    /// `stdio` or `tcp:PORT`
    #[arg(long, default_value = "stdio")]
    pub transport: String,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    crate::logging::init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match crate::commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}
