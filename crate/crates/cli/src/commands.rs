use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use protovit::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use protovit::config::{ConfigFileError, Dtype, RunConfig, SEED_ENV};
use protovit::data::{self, DataError, Dataset, SyntheticSpec};
use protovit::evaluator::{self, EvalError, EvalReport, RepeatSummary};
use protovit::gradcheck::{self, CheckConfig, GradcheckError};
use protovit::optim::OptimError;
use protovit::rng::{Purpose, SeedStreams};
use protovit::trainer::{self, history_csv, TrainError};
use protovit::{Real, ViTConfig, ViTParams};

use crate::args::{ConfigArgs, EvalArgs, ExportArgs, GenDataArgs, GradcheckArgs, ModelSource, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.pvt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: a check failed or an operation could not complete.
    Failed(String),
    /// Exit 2: bad flags, config or inputs.
    Usage(String),
    /// Exit 3: training hit a non-finite value.
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Failed(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Failed(m) | Failure::Usage(m) | Failure::Numeric(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

impl From<ConfigFileError> for Failure {
    fn from(e: ConfigFileError) -> Self {
        Failure::Usage(format!("config: {e}"))
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingSplit(_) | DataError::NoClasses(_) | DataError::Invalid(_) => Failure::Usage(e.to_string()),
            other => Failure::Failed(other.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } | CheckpointError::Params { .. } => Failure::Usage(e.to_string()),
            CheckpointError::Format { .. } => Failure::Failed(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ImageSize { .. } => Failure::Usage(e.to_string()),
            other => Failure::Failed(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. }
            | TrainError::Optim {
                source: OptimError::NonFiniteGradient { .. },
                ..
            } => Failure::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::OptimConfig(_) | TrainError::Sampler(_) => Failure::Usage(e.to_string()),
            _ => Failure::Failed(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Failed(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn to_json<V: Serialize>(v: &V) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn gen_data(a: &GenDataArgs) -> Outcome {
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        image_size: a.size,
        seed: a.seed,
        split: a.split.clone(),
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = data::generate_synthetic(&a.out, &spec).map_err(|e| Failure::Failed(e.to_string()))?;
    log::info!("wrote {} images in {} classes", ds.len(), ds.class_names.len());
    println!("{}", a.out.join(data::MANIFEST_FILE).display());
    Ok(())
}

/// Metadata written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: RunConfig,
    /// The resolved config in config-file syntax.
    pub config_text: String,
    pub model: ViTConfig,
    pub seed: u64,
    pub dtype: Dtype,
    pub distance: String,
    pub optimizer_mode: String,
    pub meta_batch: usize,
    /// The text describes batches of 64 episodic tasks per iteration; this
    /// build steps once per `meta_batch` episodes.
    pub meta_batch_note: String,
    pub dataset: DatasetMeta,
    pub val_dataset: Option<DatasetMeta>,
    pub param_count: usize,
    pub episodes_completed: usize,
    pub skipped_episodes: Vec<usize>,
    pub optimizer_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub root: PathBuf,
    pub split: String,
    pub images: usize,
    pub classes: usize,
    /// Git-style SHA-256 object hash of the split's `path,label` manifest.
    pub manifest_hash: String,
}

impl DatasetMeta {
    fn of(root: &Path, ds: &Dataset) -> Self {
        Self {
            root: root.to_path_buf(),
            split: ds.split.clone(),
            images: ds.len(),
            classes: ds.class_names.len(),
            manifest_hash: ds.manifest_hash(),
        }
    }
}

fn read_config_file(common: &ConfigArgs) -> Result<Option<String>, Failure> {
    match &common.config {
        Some(p) => fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => Ok(None),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

pub fn train(a: &TrainArgs) -> Outcome {
    let file = read_config_file(&a.common)?;
    let cfg = RunConfig::resolve(file.as_deref(), &a.overrides(), env_seed().as_deref())?;
    cfg.train.validate().map_err(Failure::from)?;
    match cfg.dtype {
        Dtype::F32 => train_typed::<f32>(&cfg, &a.out),
        Dtype::F64 => train_typed::<f64>(&cfg, &a.out),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, out: &Path) -> Outcome {
    let model = cfg.model().map_err(|e| Failure::Usage(e.to_string()))?;
    let root = &cfg.data.root;
    let train_set = data::load_dataset(root, &cfg.data.train_split)?;
    let val_set = if root.join(&cfg.data.val_split).is_dir() {
        Some(data::load_dataset(root, &cfg.data.val_split)?)
    } else {
        log::info!("no {} split under {}; training without validation", cfg.data.val_split, root.display());
        None
    };
    if train_set.images[0].channels != model.in_channels {
        return Err(Failure::Usage(format!(
            "dataset has {} channels, model expects {}",
            train_set.images[0].channels, model.in_channels
        )));
    }

    let streams = SeedStreams::new(cfg.train.seed);
    let init = ViTParams::<T>::init(&model, &mut streams.stream(Purpose::Init, 0)).map_err(|e| Failure::Usage(e.to_string()))?;
    let outcome = trainer::train(&init, &train_set, val_set.as_ref(), &cfg.train)?;

    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.params).map_err(|e| Failure::Failed(e.to_string()))?;
    write_file(&out.join(HISTORY_FILE), history_csv(&outcome.history))?;
    write_file(&out.join(CONFIG_ECHO_FILE), cfg.to_text())?;
    let meta = RunMeta {
        config: cfg.clone(),
        config_text: cfg.to_text(),
        model: model.clone(),
        seed: cfg.train.seed,
        dtype: cfg.dtype,
        distance: cfg.train.distance.to_string(),
        optimizer_mode: cfg.train.optim.mode.to_string(),
        meta_batch: cfg.train.meta_batch,
        meta_batch_note: "paper text: 64 episodic tasks per iteration; reference loop: one episode per step".into(),
        dataset: DatasetMeta::of(root, &train_set),
        val_dataset: val_set.as_ref().map(|v| DatasetMeta::of(root, v)),
        param_count: outcome.params.param_count(),
        episodes_completed: outcome.history.len(),
        skipped_episodes: outcome.skipped.clone(),
        optimizer_steps: outcome.optim.t,
    };
    write_file(&out.join(RUN_FILE), to_json(&meta))?;
    if let Some(last) = outcome.history.last() {
        println!("episode {}: loss {:.4e}, train accuracy {:.4}", last.episode, last.loss + 0.0, last.train_acc);
    }
    println!("{}", out.display());
    Ok(())
}

fn read_meta(path: &Path) -> Result<RunMeta, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Resolves the checkpoint path, the run config and the default output
/// directory for commands that load a trained model.
fn resolve_model(source: &ModelSource, common: &ConfigArgs, extra: &[(String, String)]) -> Result<(PathBuf, RunConfig, PathBuf), Failure> {
    let (ckpt, run_dir) = match (&source.run, &source.checkpoint) {
        (Some(run), _) => (run.join(CHECKPOINT_FILE), run.clone()),
        (None, Some(c)) => (c.clone(), c.parent().map(Path::to_path_buf).unwrap_or_default()),
        (None, None) => return Err(Failure::Usage("one of --run or --checkpoint is required".into())),
    };
    if !ckpt.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let meta_path = run_dir.join(RUN_FILE);
    let (base, env) = if meta_path.is_file() {
        (read_meta(&meta_path)?.config, None)
    } else if source.run.is_some() {
        return Err(Failure::Usage(format!("{} not found", meta_path.display())));
    } else {
        (RunConfig::default(), env_seed())
    };
    let file = read_config_file(common)?;
    let mut overrides = common.overrides();
    overrides.extend_from_slice(extra);
    let cfg = RunConfig::resolve_onto(base, file.as_deref(), &overrides, env.as_deref())?;
    Ok((ckpt, cfg, run_dir))
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let (ckpt, cfg, run_dir) = resolve_model(&a.source, &a.common, &a.overrides()[a.common.overrides().len()..])?;
    match cfg.dtype {
        Dtype::F32 => eval_typed::<f32>(&ckpt, &cfg, a.out.as_deref().unwrap_or(&run_dir)),
        Dtype::F64 => eval_typed::<f64>(&ckpt, &cfg, a.out.as_deref().unwrap_or(&run_dir)),
    }
}

fn eval_typed<T: Real>(ckpt: &Path, cfg: &RunConfig, out: &Path) -> Outcome {
    let model = cfg.model().map_err(|e| Failure::Usage(e.to_string()))?;
    let params: ViTParams<T> = load_checkpoint(ckpt, &model)?;
    let ds = data::load_dataset(&cfg.data.root, &cfg.data.test_split)?;
    if cfg.eval.repeats == 0 || cfg.eval.episodes == 0 {
        return Err(Failure::Usage("episodes and repeats must be positive".into()));
    }
    let mut reports: Vec<EvalReport> = Vec::with_capacity(cfg.eval.repeats);
    for r in 0..cfg.eval.repeats {
        let opts = cfg.eval_options(cfg.train.seed.wrapping_add(r as u64));
        reports.push(evaluator::evaluate(&params, &ds, &opts)?);
    }
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let (json, text) = if reports.len() == 1 {
        let r = reports.pop().expect("one report");
        (to_json(&r), r.render())
    } else {
        let summary = RepeatSummary::from_reports(reports).expect("non-empty");
        (to_json(&summary), summary.render())
    };
    write_file(&out.join(REPORT_JSON), json)?;
    write_file(&out.join(REPORT_TEXT), &text)?;
    print!("{text}");
    Ok(())
}

pub fn export(a: &ExportArgs) -> Outcome {
    let extra: Vec<(String, String)> = a.split.iter().map(|s| ("data.test_split".to_string(), s.clone())).collect();
    let (ckpt, cfg, _) = resolve_model(&a.source, &a.common, &extra)?;
    match cfg.dtype {
        Dtype::F32 => export_typed::<f32>(&ckpt, &cfg, &a.out),
        Dtype::F64 => export_typed::<f64>(&ckpt, &cfg, &a.out),
    }
}

fn export_typed<T: Real>(ckpt: &Path, cfg: &RunConfig, out: &Path) -> Outcome {
    let model = cfg.model().map_err(|e| Failure::Usage(e.to_string()))?;
    let params: ViTParams<T> = load_checkpoint(ckpt, &model)?;
    let ds = data::load_dataset(&cfg.data.root, &cfg.data.test_split)?;
    evaluator::export_embeddings(&params, &ds, &cfg.train.augment, out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    let cfg = CheckConfig {
        seed: a.seed,
        ..Default::default()
    };
    let reports = gradcheck::run_suite(&a.ops, a.inject_fault, &cfg).map_err(|e| match e {
        GradcheckError::UnknownOp(op) => Failure::Usage(format!(
            "unknown op {op:?}; known ops: {}",
            gradcheck::op_names().join(",")
        )),
        other => Failure::Failed(other.to_string()),
    })?;
    println!("{:<20} {:>12} {:>8}  status", "op", "max_rel_err", "checks");
    for r in &reports {
        println!(
            "{:<20} {:>12.3e} {:>8}  {}",
            r.op,
            r.max_rel_err,
            r.comparisons,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.json {
        write_file(path, to_json(&reports))?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (max relative error {:.3e} at {})", r.op, r.max_rel_err, r.worst_at))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!("gradient check failed: {}", failed.join("; "))))
    }
}
