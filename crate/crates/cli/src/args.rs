use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "protovit", version, about = "Few-shot image classification with a ViT prototypical network")]
pub struct Cli {
    /// Leave subnormal floating-point arithmetic enabled (slower, bit-for-bit IEEE).
    #[arg(long, global = true)]
    pub keep_denormals: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic textured dataset in the on-disk layout.
    GenData(GenDataArgs),
    /// Train episodically and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on few-shot episodes.
    Eval(EvalArgs),
    /// Compare every backward rule with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write eval-mode embeddings of a dataset split as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by commands that resolve a run configuration. Each flag
/// overrides the matching config-file key.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Config file (`key = value` with `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// tiny | small | micro
    #[arg(long)]
    pub preset: Option<String>,
    /// f32 | f64
    #[arg(long)]
    pub dtype: Option<String>,
    /// squared | unsquared
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// Dataset root directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("model.preset", self.preset.clone());
        push("dtype", self.dtype.clone());
        push("distance", self.distance.clone());
        push("episode.ways", self.ways.map(|v| v.to_string()));
        push("episode.shots", self.shots.map(|v| v.to_string()));
        push("episode.queries", self.queries.map(|v| v.to_string()));
        push("data.root", self.data.as_ref().map(|p| p.display().to_string()));
        out
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub eval_freq: Option<usize>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// decoupled | coupled
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub clip_max_norm: Option<f64>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub val_split: Option<String>,
    /// Run directory to create (checkpoint, history.csv, run.json).
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.common.overrides();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        push("train.episodes", self.episodes.map(|v| v.to_string()));
        push("train.eval_freq", self.eval_freq.map(|v| v.to_string()));
        push("train.val_episodes", self.val_episodes.map(|v| v.to_string()));
        push("optim.lr", self.lr.map(|v| v.to_string()));
        push("optim.weight_decay", self.weight_decay.map(|v| v.to_string()));
        push("optim.mode", self.optimizer.clone());
        push("train.clip_max_norm", self.clip_max_norm.map(|v| v.to_string()));
        push("train.meta_batch", self.meta_batch.map(|v| v.to_string()));
        push("data.train_split", self.train_split.clone());
        push("data.val_split", self.val_split.clone());
        out
    }
}

/// Where the model comes from: a run directory or a bare checkpoint.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Run directory written by `train`; its run.json supplies the config.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; the config comes from a run.json beside it, or from --preset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Repeat evaluation with seeds seed, seed+1, …
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Split to evaluate (default: the config's test split).
    #[arg(long)]
    pub split: Option<String>,
    /// Directory for report.json and report.txt (default: the run directory,
    /// else the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.common.overrides();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        push("eval.episodes", self.episodes.map(|v| v.to_string()));
        push("eval.repeats", self.repeats.map(|v| v.to_string()));
        push("eval.workers", self.workers.map(|v| v.to_string()));
        push("data.test_split", self.split.clone());
        out
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated op names to check (default: all).
    #[arg(long, value_delimiter = ',')]
    pub ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the per-op table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Add a deliberately wrong backward rule to the suite.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Split to export (default: the config's test split).
    #[arg(long)]
    pub split: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}
